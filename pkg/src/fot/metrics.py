"""Grading and efficiency accounting.

Pass@1 grading works off answer extraction: the last balanced boxed span
for math, a normalized letter for science QA, the last fenced code block
for coding (recorded, graded externally). Loop detection counts repeated
sentences in reasoning output as an inefficiency proxy.
"""

from __future__ import annotations

import logging
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterable

from .domain import DomainKind, GRADABLE_KINDS, Problem, Solution
from .errors import MissingGold

logger = logging.getLogger(__name__)

_BOXED_MARK = "\\boxed{"


def extract_boxed(text: str) -> str | None:
    """Contents of the last balanced ``\\boxed{...}`` span, or None.

    Brace matching handles nesting, so ``\\boxed{\\frac{13}{12}}`` yields
    ``\\frac{13}{12}``. Unbalanced spans are skipped in favor of earlier
    balanced ones.
    """

    starts = [m.start() for m in re.finditer(re.escape(_BOXED_MARK), text)]
    for start in reversed(starts):
        i = start + len(_BOXED_MARK)
        depth = 1
        while i < len(text):
            ch = text[i]
            if ch == "{":
                depth += 1
            elif ch == "}":
                depth -= 1
                if depth == 0:
                    return text[start + len(_BOXED_MARK): i]
            i += 1
    return None


def extract_choice_letter(text: str) -> str | None:
    """Boxed answer normalized to a single letter A-D, or None."""
    boxed = extract_boxed(text)
    if boxed is None:
        return None
    candidate = boxed.strip().strip("$").strip()
    if len(candidate) == 1 and candidate.upper() in "ABCD":
        return candidate.upper()
    return None


_FENCE_RE = re.compile(r"```([A-Za-z0-9_+-]*)[ \t]*\n?(.*?)```", re.DOTALL)


def extract_code_block(text: str) -> str | None:
    """Contents of the last triple-backtick fenced block, tag stripped."""
    blocks = _FENCE_RE.findall(text)
    if not blocks:
        return None
    return blocks[-1][1].rstrip("\n")


def normalize_answer(answer: str) -> str:
    """Collapse whitespace and strip surrounding dollar signs."""
    collapsed = " ".join(answer.split())
    return collapsed.strip("$").strip()


def grade(problem: Problem, solution: Solution) -> bool:
    """Pass@1 check of one solution against the problem's gold answer.

    Math compares normalized boxed strings (string-level, not symbolic);
    science QA compares letters. Coding, paper-reading, and freeform tasks
    are not gradable here: they return False and are flagged for external
    grading, keeping the pass@1 denominator fixed.
    """

    kind = problem.domain_kind
    if kind not in GRADABLE_KINDS:
        logger.info("problem %s (%s): externally graded, recording as incorrect here",
                    problem.id, kind.value)
        return False
    if problem.gold_answer is None:
        raise MissingGold(f"problem {problem.id} ({kind.value}) has no gold answer")
    if kind is DomainKind.MATH:
        boxed = extract_boxed(solution.text)
        if boxed is None:
            return False
        return normalize_answer(boxed) == normalize_answer(problem.gold_answer)
    letter = extract_choice_letter(solution.text)
    if letter is None:
        return False
    return letter == problem.gold_answer.strip().strip("$").strip().upper()


def is_externally_graded(problem: Problem) -> bool:
    return problem.domain_kind not in GRADABLE_KINDS


_SENTENCE_SPLIT_RE = re.compile(r"[.!?\n]+")


def split_sentences(text: str) -> list[str]:
    """Sentence segmentation for loop counting: split on ``.``, ``!``, ``?``
    and newlines, trim, lowercase, collapse internal whitespace."""
    out = []
    for raw in _SENTENCE_SPLIT_RE.split(text):
        sentence = " ".join(raw.split()).lower()
        if sentence:
            out.append(sentence)
    return out


def detect_loops(text: str, min_len: int = 5) -> int:
    """Count duplicated-sentence loops in a reasoning output.

    Every occurrence beyond the first of any normalized sentence with at
    least ``min_len`` words counts as one loop; short sentences are ignored
    so that fillers like "Yes." do not register.
    """

    if min_len < 1:
        raise ValueError("min_len must be >= 1")
    counts = Counter(
        s for s in split_sentences(text) if len(s.split()) >= min_len
    )
    return sum(c - 1 for c in counts.values() if c > 1)


@dataclass(frozen=True)
class BenchmarkRow:
    """Per-benchmark (per-agent) stats row of a round summary."""

    accuracy: float
    mean_completion_tokens: float
    completion_tokens: int
    loop_count: int
    mean_loops: float
    trace_count: int
    task_count: int

    def to_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "mean_completion_tokens": self.mean_completion_tokens,
            "completion_tokens": self.completion_tokens,
            "loop_count": self.loop_count,
            "mean_loops": self.mean_loops,
            "trace_count": self.trace_count,
            "task_count": self.task_count,
        }


@dataclass(frozen=True)
class RoundSummary:
    """Aggregate view over round records.

    ``total_loops`` is the exact sum over tasks; ``mean_loops_per_task`` is
    reported alongside it since either reading of "total loops" can be
    wanted.
    """

    mean_accuracy: float
    mean_completion_tokens: float
    total_loops: int
    mean_loops_per_task: float
    total_completion_tokens: int
    total_tasks: int
    per_benchmark: dict[str, BenchmarkRow] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "mean_accuracy": self.mean_accuracy,
            "mean_completion_tokens": self.mean_completion_tokens,
            "total_loops": self.total_loops,
            "mean_loops_per_task": self.mean_loops_per_task,
            "total_completion_tokens": self.total_completion_tokens,
            "total_tasks": self.total_tasks,
            "per_benchmark": {k: v.to_dict() for k, v in self.per_benchmark.items()},
        }

    def to_csv(self) -> str:
        """Overall row plus one row per benchmark."""
        import csv
        import io

        buf = io.StringIO()
        writer = csv.writer(buf)
        writer.writerow([
            "benchmark", "accuracy", "mean_completion_tokens",
            "loop_count", "mean_loops", "trace_count", "task_count",
        ])
        writer.writerow([
            "overall", self.mean_accuracy, self.mean_completion_tokens,
            self.total_loops, self.mean_loops_per_task, "", self.total_tasks,
        ])
        for name, row in self.per_benchmark.items():
            writer.writerow([
                name, row.accuracy, row.mean_completion_tokens,
                row.loop_count, row.mean_loops, row.trace_count, row.task_count,
            ])
        return buf.getvalue()


def summarize(records: Iterable["RoundRecord"]) -> RoundSummary:  # noqa: F821
    """Aggregate round records into a benchmark summary.

    Accuracies and per-task token counts are averaged over agents; loop and
    token totals are exact integer sums. A single-agent record echoes
    through unchanged.
    """

    records = list(records)
    if not records:
        raise ValueError("summarize needs at least one round record")

    accuracies: list[float] = []
    token_means: list[float] = []
    total_loops = 0
    total_tokens = 0
    total_tasks = 0
    per_benchmark: dict[str, BenchmarkRow] = {}
    for record in records:
        for agent_id, stats in record.per_agent.items():
            accuracies.append(stats.accuracy)
            token_means.append(stats.mean_completion_tokens)
            total_loops += stats.loop_count
            total_tokens += stats.completion_tokens
            total_tasks += stats.task_count
            per_benchmark[agent_id] = BenchmarkRow(
                accuracy=stats.accuracy,
                mean_completion_tokens=stats.mean_completion_tokens,
                completion_tokens=stats.completion_tokens,
                loop_count=stats.loop_count,
                mean_loops=stats.mean_loops,
                trace_count=stats.trace_count,
                task_count=stats.task_count,
            )
    return RoundSummary(
        mean_accuracy=sum(accuracies) / len(accuracies),
        mean_completion_tokens=sum(token_means) / len(token_means),
        total_loops=total_loops,
        mean_loops_per_task=(total_loops / total_tasks) if total_tasks else 0.0,
        total_completion_tokens=total_tokens,
        total_tasks=total_tasks,
        per_benchmark=per_benchmark,
    )
