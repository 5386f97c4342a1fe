"""Research-insight-discovery evaluation: judge whether a paper's core
contribution is guided by the insight library, and compute guidance rates.

The judge backend may differ from the federation backends, so libraries
built by one model can be scored by another.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import prompts
from .domain import InsightLibrary, extract_json_object, render_library
from .errors import NoJsonFound
from .transport import ChatBackend, Stage

logger = logging.getLogger(__name__)

#: Paper text beyond this many characters is cut to fit judge contexts; the
#: verdict records that it happened.
DEFAULT_MAX_PAPER_CHARS = 200_000


@dataclass(frozen=True)
class GuidanceVerdict:
    paper_id: str
    guided: bool
    matched_insights: tuple[str, ...] = ()
    judge_failed: bool = False
    truncated: bool = False

    def to_dict(self) -> dict:
        return {
            "paper_id": self.paper_id,
            "guided": self.guided,
            "matched_insights": list(self.matched_insights),
            "judge_failed": self.judge_failed,
            "truncated": self.truncated,
        }


@dataclass(frozen=True)
class GuidanceReport:
    """Guided fractions overall and per acceptance tier.

    Failed judgments are excluded from every denominator and counted in
    ``excluded_count``.
    """

    overall_rate: float
    tier_rates: dict[str, float] = field(default_factory=dict)
    total: int = 0
    guided_count: int = 0
    excluded_count: int = 0
    tier_counts: dict[str, int] = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "overall_rate": self.overall_rate,
            "tier_rates": dict(self.tier_rates),
            "total": self.total,
            "guided_count": self.guided_count,
            "excluded_count": self.excluded_count,
            "tier_counts": dict(self.tier_counts),
        }


def _coerce_bool(value: object) -> bool:
    if isinstance(value, bool):
        return value
    if isinstance(value, str):
        return value.strip().lower() in ("true", "yes", "1")
    return bool(value)


def judge_guidance(
    library: InsightLibrary,
    paper_text: str,
    backend: ChatBackend,
    *,
    paper_id: str = "",
    max_paper_chars: int = DEFAULT_MAX_PAPER_CHARS,
) -> GuidanceVerdict:
    """Ask the judge whether any library insight guides this paper.

    Matched insight names that are not current library keys are dropped
    with a log line; a guided verdict left with no surviving matches is
    downgraded to not guided. A judge response with no parseable JSON
    (after one retry) records a failed judgment instead of raising.
    """

    if not library:
        raise ValueError("cannot judge guidance against an empty library")
    if not paper_text or not paper_text.strip():
        raise ValueError("paper text must be non-empty")

    truncated = len(paper_text) > max_paper_chars
    if truncated:
        logger.warning(
            "paper %s: text truncated from %d to %d chars for the judge",
            paper_id or "<unnamed>", len(paper_text), max_paper_chars,
        )
        paper_text = paper_text[:max_paper_chars]

    prompt = prompts.fill(
        prompts.JUDGE_PROMPT,
        insights=render_library(library),
        paper_text=paper_text,
    )
    try:
        exchange = backend.complete(Stage.JUDGE, prompt)
        try:
            obj = extract_json_object(exchange.response)
        except NoJsonFound:
            logger.warning("judge response had no JSON object; retrying once")
            retry = backend.complete(Stage.JUDGE, prompt + prompts.JSON_RETRY_NUDGE)
            obj = extract_json_object(retry.response)
    except NoJsonFound:
        logger.warning("paper %s: judge produced no JSON after retry", paper_id)
        return GuidanceVerdict(
            paper_id=paper_id, guided=False, judge_failed=True, truncated=truncated
        )

    guided = _coerce_bool(obj.get("guided", False))
    raw_matches = obj.get("matched_insights") or []
    if not isinstance(raw_matches, list):
        raw_matches = [raw_matches]
    matches = []
    for name in raw_matches:
        if name in library.entries:
            matches.append(name)
        else:
            logger.warning("paper %s: dropped unknown matched insight %r", paper_id, name)
    if guided and not matches:
        logger.warning("paper %s: guided verdict with no surviving matches; downgrading", paper_id)
        guided = False
    return GuidanceVerdict(
        paper_id=paper_id,
        guided=guided,
        matched_insights=tuple(matches),
        truncated=truncated,
    )


def guidance_rate(
    verdicts: Sequence[GuidanceVerdict],
    tiers: Mapping[str, str] | None = None,
) -> GuidanceReport:
    """Fraction of papers judged guided, overall and per tier.

    When every paper has a tier, the overall rate equals the tier-size
    weighted mean of tier rates.
    """

    if not verdicts:
        raise ValueError("guidance_rate needs at least one verdict")
    valid = [v for v in verdicts if not v.judge_failed]
    excluded = len(verdicts) - len(valid)
    guided_count = sum(1 for v in valid if v.guided)
    overall = guided_count / len(valid) if valid else 0.0

    tier_totals: dict[str, int] = {}
    tier_guided: dict[str, int] = {}
    if tiers:
        for v in valid:
            tier = tiers.get(v.paper_id)
            if tier is None:
                continue
            tier_totals[tier] = tier_totals.get(tier, 0) + 1
            if v.guided:
                tier_guided[tier] = tier_guided.get(tier, 0) + 1
    tier_rates = {
        tier: tier_guided.get(tier, 0) / count for tier, count in sorted(tier_totals.items())
    }
    return GuidanceReport(
        overall_rate=overall,
        tier_rates=tier_rates,
        total=len(valid),
        guided_count=guided_count,
        excluded_count=excluded,
        tier_counts=dict(sorted(tier_totals.items())),
    )
