"""Data-minimization audit: n-gram shingle overlap between what leaves the
agents (traces, insight library) and what must stay local (problem
statements, gold answers).

Near-zero Jaccard similarity between the two sides is the evidence that no
verbatim content leaked through the uploads.
"""

from __future__ import annotations

import string
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from .aggregator import IndexedTraceSet
from .domain import InsightLibrary, Problem, render_library

DEFAULT_SHINGLE_WIDTH = 4

#: Fixed tokenizer, recorded in every report for reproducibility.
TOKENIZER_DESCRIPTION = "lowercase; split on whitespace; strip leading/trailing punctuation"

_PUNCT = string.punctuation


def tokenize(text: str) -> list[str]:
    """Lowercase, split on whitespace, strip edge punctuation per token.

    Tokens that are nothing but punctuation vanish entirely.
    """

    tokens = []
    for raw in text.lower().split():
        token = raw.strip(_PUNCT)
        if token:
            tokens.append(token)
    return tokens


def shingles(text: str, n: int = DEFAULT_SHINGLE_WIDTH) -> set[tuple[str, ...]]:
    """Set of all consecutive n-token windows of ``text``.

    Texts with fewer than n tokens produce the empty set.
    """

    if n < 1:
        raise ValueError("shingle width must be >= 1")
    tokens = tokenize(text)
    return {tuple(tokens[i: i + n]) for i in range(len(tokens) - n + 1)}


def jaccard(a: set, b: set) -> float:
    """Intersection over union; two empty sets are 0.0 by convention."""
    if not a and not b:
        return 0.0
    return len(a & b) / len(a | b)


def corpus_shingles(
    items: Iterable[str], n: int = DEFAULT_SHINGLE_WIDTH
) -> tuple[set[tuple[str, ...]], int]:
    """Shingle a corpus of documents item by item.

    Items are shingled separately and unioned, which is equivalent to
    concatenating them with a separator that never enters a window: no
    spurious shingles span two documents. Also returns the corpus token
    count.
    """

    merged: set[tuple[str, ...]] = set()
    token_count = 0
    for item in items:
        merged |= shingles(item, n)
        token_count += len(tokenize(item))
    return merged, token_count


@dataclass(frozen=True)
class PrivacyReport:
    """The two leakage figures plus the corpus statistics behind them."""

    n: int
    jaccard_traces_vs_problems: float
    jaccard_library_vs_problems_and_answers: float
    trace_token_count: int
    library_token_count: int
    problem_token_count: int
    answer_token_count: int
    insight_count: int
    trace_count: int
    problem_count: int
    shingle_counts: dict[str, int] = field(default_factory=dict)
    tokenizer: str = TOKENIZER_DESCRIPTION

    def display_values(self) -> dict[str, str]:
        """Three-decimal display figures alongside the full-precision fields."""
        return {
            "jaccard_traces_vs_problems": f"{self.jaccard_traces_vs_problems:.3f}",
            "jaccard_library_vs_problems_and_answers": (
                f"{self.jaccard_library_vs_problems_and_answers:.3f}"
            ),
        }

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "jaccard_traces_vs_problems": self.jaccard_traces_vs_problems,
            "jaccard_library_vs_problems_and_answers": self.jaccard_library_vs_problems_and_answers,
            "display": self.display_values(),
            "trace_token_count": self.trace_token_count,
            "library_token_count": self.library_token_count,
            "problem_token_count": self.problem_token_count,
            "answer_token_count": self.answer_token_count,
            "insight_count": self.insight_count,
            "trace_count": self.trace_count,
            "problem_count": self.problem_count,
            "shingle_counts": dict(self.shingle_counts),
            "tokenizer": self.tokenizer,
        }


def privacy_report(
    traces: IndexedTraceSet,
    problems: Sequence[Problem],
    library: InsightLibrary,
    n: int = DEFAULT_SHINGLE_WIDTH,
) -> PrivacyReport:
    """Compute both leakage figures for one run.

    Corpora: all trace descriptions; all problem statements; all gold
    answers; the rendered insight library. Figures: traces vs problems,
    and library vs problems + answers.
    """

    if n < 1:
        raise ValueError("shingle width must be >= 1")
    trace_sh, trace_tokens = corpus_shingles((t.description for t in traces.traces), n)
    problem_sh, problem_tokens = corpus_shingles((p.statement for p in problems), n)
    answer_sh, answer_tokens = corpus_shingles(
        (p.gold_answer for p in problems if p.gold_answer), n
    )
    library_sh, library_tokens = corpus_shingles(
        [render_library(library)] if library else [], n
    )
    return PrivacyReport(
        n=n,
        jaccard_traces_vs_problems=jaccard(trace_sh, problem_sh),
        jaccard_library_vs_problems_and_answers=jaccard(
            library_sh, problem_sh | answer_sh
        ),
        trace_token_count=trace_tokens,
        library_token_count=library_tokens,
        problem_token_count=problem_tokens,
        answer_token_count=answer_tokens,
        insight_count=len(library),
        trace_count=len(traces),
        problem_count=len(problems),
        shingle_counts={
            "traces": len(trace_sh),
            "problems": len(problem_sh),
            "answers": len(answer_sh),
            "library": len(library_sh),
        },
    )
