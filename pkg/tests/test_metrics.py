"""Grading, answer extraction, loop detection, summaries."""

from __future__ import annotations

import random

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fot.domain import DomainKind, Solution, UsageStats
from fot.errors import MissingGold
from fot.federation import AgentRoundStats, RoundRecord
from fot.metrics import (
    detect_loops,
    extract_boxed,
    extract_choice_letter,
    extract_code_block,
    grade,
    normalize_answer,
    split_sentences,
    summarize,
)

from conftest import make_problem


def _solution(text: str, pid: str = "p1") -> Solution:
    return Solution(problem_id=pid, text=text, usage=UsageStats(1, 1))


class TestExtractBoxed:
    def test_plain_answer(self):
        assert extract_boxed("…The remainder is 248.\n\\boxed{248}") == "248"

    def test_nested_braces(self):
        assert extract_boxed("\\boxed{\\frac{13}{12}}") == "\\frac{13}{12}"

    def test_absent(self):
        assert extract_boxed("no box") is None

    def test_last_span_wins(self):
        assert extract_boxed("\\boxed{1} then \\boxed{2}") == "2"

    def test_unbalanced_final_span_falls_back(self):
        assert extract_boxed("\\boxed{ok} trailing \\boxed{broken") == "ok"

    def test_empty_box(self):
        assert extract_boxed("\\boxed{}") == ""


def _random_balanced(rng: random.Random, depth: int = 0) -> str:
    parts = []
    for _ in range(rng.randint(1, 3)):
        roll = rng.random()
        if roll < 0.45 and depth < 4:
            parts.append("{" + _random_balanced(rng, depth + 1) + "}")
        else:
            parts.append("".join(rng.choices("ab1\\+ ", k=rng.randint(0, 5))))
    return "".join(parts)


class TestBoxedPropertyNestedBraces:
    def test_generated_balanced_strings(self):
        rng = random.Random(20240817)
        for _ in range(1000):
            interior = _random_balanced(rng)
            prose = "".join(rng.choices("xyz .,", k=rng.randint(0, 12)))
            text = f"{prose}\\boxed{{{interior}}}{prose}"
            assert extract_boxed(text) == interior


class TestChoiceLetter:
    def test_plain(self):
        assert extract_choice_letter("reasoning…\n\\boxed{C}") == "C"

    def test_case_and_space_normalized(self):
        assert extract_choice_letter("\\boxed{ c }") == "C"

    def test_non_letter(self):
        assert extract_choice_letter("\\boxed{42}") is None

    def test_no_box(self):
        assert extract_choice_letter("the answer is C") is None


class TestCodeBlock:
    def test_fence_strip(self):
        assert extract_code_block("```python\nprint(1)\n```") == "print(1)"

    def test_last_block_returned(self):
        text = "```python\nfirst\n```\nthen\n```\nsecond\n```"
        assert extract_code_block(text) == "second"

    def test_no_fence(self):
        assert extract_code_block("plain text") is None


class TestGrade:
    def test_math_correct(self):
        problem = make_problem(gold="248")
        assert grade(problem, _solution("The remainder is 248.\n\\boxed{248}"))

    def test_math_incorrect(self):
        problem = make_problem(gold="248")
        assert not grade(problem, _solution("\\boxed{752}"))

    def test_math_whitespace_normalized(self):
        problem = make_problem(gold="248")
        assert grade(problem, _solution("\\boxed{ 248 }"))

    def test_math_dollar_stripped(self):
        problem = make_problem(gold="$x+1$")
        assert grade(problem, _solution("\\boxed{x+1}"))

    def test_science_letter(self):
        problem = make_problem(kind=DomainKind.SCIENCE_QA, gold="C")
        assert grade(problem, _solution("analysis\n\\boxed{C}"))
        assert not grade(problem, _solution("\\boxed{D}"))

    def test_missing_gold(self):
        problem = make_problem(gold=None)
        with pytest.raises(MissingGold):
            grade(problem, _solution("\\boxed{1}"))

    def test_coding_flagged_external(self, caplog):
        problem = make_problem(kind=DomainKind.CODING, gold=None)
        with caplog.at_level("INFO"):
            assert grade(problem, _solution("```python\nprint(1)\n```")) is False
        assert any("externally graded" in r.message for r in caplog.records)

    def test_no_box_is_incorrect(self):
        problem = make_problem(gold="4")
        assert not grade(problem, _solution("the answer is 4"))

    @given(st.text(alphabet="0123456789x+- $\t", min_size=1, max_size=20))
    @settings(max_examples=50, deadline=None)
    def test_symmetric_under_normalization(self, gold):
        problem_raw = make_problem(gold=gold)
        boxed = f"\\boxed{{{gold}}}"
        norm = normalize_answer(gold)
        result_raw = grade(problem_raw, _solution(boxed))
        if norm:
            problem_norm = make_problem(gold=norm)
            assert grade(problem_norm, _solution(f"\\boxed{{{norm}}}")) == result_raw


def loops_oracle(text: str, min_len: int) -> int:
    """Independent O(n^2) pairwise count of repeated-sentence occurrences."""
    sentences = [s for s in split_sentences(text) if len(s.split()) >= min_len]
    count = 0
    for i in range(len(sentences)):
        for j in range(i):
            if sentences[i] == sentences[j]:
                count += 1
                break
    return count


class TestDetectLoops:
    def test_no_repeats(self):
        assert detect_loops("A b c. D e f.", min_len=1) == 0

    def test_three_identical_sentences(self):
        assert detect_loops("Try x now. Try x now. Try x now.", min_len=3) == 2

    def test_below_length_floor(self):
        assert detect_loops("Yes. Yes.", min_len=3) == 0

    def test_case_and_spacing_normalized(self):
        assert detect_loops("Try  X now. try x NOW.", min_len=3) == 1

    def test_newline_is_sentence_boundary(self):
        assert detect_loops("try x now\ntry x now", min_len=3) == 1

    def test_min_len_validation(self):
        with pytest.raises(ValueError):
            detect_loops("x", min_len=0)

    def test_matches_oracle_on_random_sample(self):
        rng = random.Random(7)
        vocab = ["try", "this", "again", "solve", "step", "now"]
        for _ in range(50):
            sentences = [
                " ".join(rng.choices(vocab, k=rng.randint(1, 6)))
                for _ in range(rng.randint(0, 40))
            ]
            text = ". ".join(sentences)
            assert detect_loops(text, min_len=3) == loops_oracle(text, 3)


def _record(per_agent: dict[str, AgentRoundStats], round_no: int = 1) -> RoundRecord:
    return RoundRecord(
        round=round_no,
        participants=tuple(per_agent),
        per_agent=per_agent,
        library_version=round_no,
        wall_time=0.0,
    )


def _stats(accuracy: float, mean_tokens: float, loops: int, tasks: int = 10) -> AgentRoundStats:
    return AgentRoundStats(
        accuracy=accuracy,
        task_count=tasks,
        correct_count=round(accuracy * tasks),
        completion_tokens=int(mean_tokens * tasks),
        mean_completion_tokens=mean_tokens,
        prompt_tokens=0,
        loop_count=loops,
        mean_loops=loops / tasks,
        trace_count=0,
        externally_graded=0,
    )


class TestSummarize:
    def test_mean_accuracy(self):
        record = _record({"a": _stats(1.0, 10, 0), "b": _stats(0.0, 10, 0)})
        assert summarize([record]).mean_accuracy == 0.5

    def test_isolated_fixture_echoes_through(self):
        # Single-agent record carrying a reference isolated-reasoning triple.
        record = _record({"solo": _stats(0.537, 6312, 7)})
        summary = summarize([record])
        assert summary.mean_accuracy == pytest.approx(0.537)
        assert summary.mean_completion_tokens == pytest.approx(6312)
        assert summary.total_loops == 7

    def test_federated_fixture_echoes_through(self):
        record = _record({"solo": _stats(0.625, 4317, 4)})
        summary = summarize([record])
        assert summary.mean_accuracy == pytest.approx(0.625)
        assert summary.mean_completion_tokens == pytest.approx(4317)
        assert summary.total_loops == 4

    def test_totals_are_exact_sums(self):
        record = _record({"a": _stats(0.5, 100, 3), "b": _stats(0.7, 50, 4)})
        summary = summarize([record])
        assert summary.total_loops == 7
        assert summary.total_completion_tokens == 100 * 10 + 50 * 10
        assert summary.total_tasks == 20

    def test_per_benchmark_rows_preserved(self):
        record = _record({"bench_a": _stats(0.5, 10, 1), "bench_b": _stats(0.9, 20, 0)})
        summary = summarize([record])
        assert set(summary.per_benchmark) == {"bench_a", "bench_b"}
        assert summary.per_benchmark["bench_b"].accuracy == 0.9

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            summarize([])

    def test_csv_export(self):
        record = _record({"bench_a": _stats(0.5, 10, 1)})
        csv_text = summarize([record]).to_csv()
        lines = csv_text.strip().splitlines()
        assert lines[0].startswith("benchmark,accuracy")
        assert lines[1].startswith("overall,0.5")
        assert lines[2].startswith("bench_a,0.5")
