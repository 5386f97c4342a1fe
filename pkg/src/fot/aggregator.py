"""Server-side aggregation: index uploaded traces, profile their
relationships, and distill the next insight library version.

Aggregation degrades rather than aborts: a failed profile leaves the
library build with "None identified" slots, and a failed build carries the
previous library forward with a version bump so there is always something
to broadcast.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from typing import Any, Mapping, Sequence

from . import prompts
from .domain import (
    Cluster,
    InsightLibrary,
    ReasoningTrace,
    Relationship,
    RelationshipType,
    TraceProfile,
    TraceSet,
    extract_json_object,
    parse_flat_entries,
    INSIGHT_PREFIX,
)
from .errors import NoJsonFound
from .transport import ChatBackend, ChatExchange, Stage

logger = logging.getLogger(__name__)

_VALID_RELATIONSHIP_TYPES = {t.value for t in RelationshipType}


@dataclass(frozen=True)
class TraceOrigin:
    agent_id: str
    problem_id: str
    original_name: str

    def to_dict(self) -> dict[str, str]:
        return {
            "agent_id": self.agent_id,
            "problem_id": self.problem_id,
            "original_name": self.original_name,
        }


@dataclass(frozen=True)
class IndexedTraceSet:
    """All agents' traces under globally unique names.

    Name collisions get zero-padded ``_001``, ``_002`` suffixes in arrival
    order; ``origin_map`` records where every indexed trace came from.
    """

    traces: tuple[ReasoningTrace, ...] = ()
    origin_map: dict[str, TraceOrigin] = field(default_factory=dict)

    def __len__(self) -> int:
        return len(self.traces)

    def __bool__(self) -> bool:
        return bool(self.traces)

    def names(self) -> set[str]:
        return {t.name for t in self.traces}

    def to_dict(self) -> dict[str, Any]:
        return {
            "traces": [t.to_dict() for t in self.traces],
            "origin_map": {k: v.to_dict() for k, v in self.origin_map.items()},
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "IndexedTraceSet":
        return cls(
            traces=tuple(ReasoningTrace.from_dict(t) for t in data["traces"]),
            origin_map={
                k: TraceOrigin(v["agent_id"], v["problem_id"], v["original_name"])
                for k, v in data["origin_map"].items()
            },
        )


def index_traces(all_sets: Sequence[TraceSet]) -> IndexedTraceSet:
    """Concatenate every agent's traces, without deduplication.

    Every name that occurs more than once is suffixed ``_001``, ``_002``...
    in arrival order; unique names pass through unchanged. Lossless: the
    indexed size equals the sum of input sizes and origin_map inverts the
    renaming.
    """

    incoming = [t for ts in all_sets for t in ts]
    counts: dict[str, int] = {}
    for trace in incoming:
        counts[trace.name] = counts.get(trace.name, 0) + 1

    used: set[str] = set()
    seen: dict[str, int] = {}
    indexed: list[ReasoningTrace] = []
    origin_map: dict[str, TraceOrigin] = {}
    for trace in incoming:
        if counts[trace.name] == 1 and trace.name not in used:
            name = trace.name
        else:
            n = seen.get(trace.name, 0)
            while True:
                n += 1
                name = f"{trace.name}_{n:03d}"
                if name not in used and counts.get(name, 0) == 0:
                    break
            seen[trace.name] = n
        used.add(name)
        indexed.append(
            ReasoningTrace(
                name=name,
                description=trace.description,
                agent_id=trace.agent_id,
                round=trace.round,
                problem_id=trace.problem_id,
            )
        )
        origin_map[name] = TraceOrigin(
            agent_id=trace.agent_id,
            problem_id=trace.problem_id,
            original_name=trace.name,
        )
    return IndexedTraceSet(traces=tuple(indexed), origin_map=origin_map)


def render_traces(indexed: IndexedTraceSet) -> str:
    """One ``[Trace] name: description`` line per indexed trace."""
    return "\n".join(f"[Trace] {t.name}: {t.description}" for t in indexed.traces)


def parse_profile_payload(
    obj: Mapping[str, Any], valid_names: set[str]
) -> tuple[TraceProfile, list[str]]:
    """Validate a raw profile object against the indexed trace names.

    Relationships with a type outside the six-value enum, unresolvable
    endpoints, or identical endpoints are dropped; clusters are kept with
    unknown trace names removed. Returns the profile and one note per drop.
    """

    notes: list[str] = []
    clusters: list[Cluster] = []
    used_ids: set[int] = set()
    next_id = 0
    for raw in obj.get("clusters") or []:
        if not isinstance(raw, Mapping):
            notes.append(f"dropped malformed cluster entry {raw!r}")
            continue
        raw_names = raw.get("traces", raw.get("trace_names", []))
        if not isinstance(raw_names, list):
            raw_names = [raw_names]
        names = []
        for name in raw_names:
            if name in valid_names:
                names.append(name)
            else:
                notes.append(f"removed unknown trace {name!r} from cluster")
        try:
            cluster_id = int(raw.get("cluster_id"))
        except (TypeError, ValueError):
            cluster_id = next_id
            notes.append(f"assigned cluster_id {cluster_id} to cluster without one")
        if cluster_id in used_ids:
            old = cluster_id
            while cluster_id in used_ids:
                cluster_id += 1
            notes.append(f"reassigned duplicate cluster_id {old} -> {cluster_id}")
        used_ids.add(cluster_id)
        next_id = max(next_id, cluster_id + 1)
        clusters.append(
            Cluster(
                cluster_id=cluster_id,
                cluster_name=str(raw.get("cluster_name", "")),
                trace_names=tuple(names),
                theme=str(raw.get("theme", "")),
            )
        )

    relationships: list[Relationship] = []
    for raw in obj.get("relationships") or []:
        if not isinstance(raw, Mapping):
            notes.append(f"dropped malformed relationship entry {raw!r}")
            continue
        rel_type = str(raw.get("relationship_type", "")).strip().lower()
        a, b = raw.get("trace_a"), raw.get("trace_b")
        if rel_type not in _VALID_RELATIONSHIP_TYPES:
            notes.append(f"dropped relationship with invalid type {raw.get('relationship_type')!r}")
            continue
        if a not in valid_names or b not in valid_names:
            notes.append(f"dropped relationship with unresolved endpoint {a!r} / {b!r}")
            continue
        if a == b:
            notes.append(f"dropped self-relationship on {a!r}")
            continue
        relationships.append(
            Relationship(
                trace_a=a,
                trace_b=b,
                relationship_type=RelationshipType(rel_type),
                description=str(raw.get("description", "")),
            )
        )
    for note in notes:
        logger.warning("profile parse: %s", note)
    return TraceProfile(clusters=tuple(clusters), relationships=tuple(relationships)), notes


def _json_with_retry(
    backend: ChatBackend,
    stage: Stage,
    prompt: str,
    log: list[ChatExchange] | None = None,
) -> dict:
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


def render_profile_prompt(indexed: IndexedTraceSet) -> str:
    return prompts.fill(
        prompts.PROFILE_PROMPT,
        trace_count=str(len(indexed)),
        traces_text=render_traces(indexed),
    )


def profile_traces(
    indexed: IndexedTraceSet,
    backend: ChatBackend,
    log: list[ChatExchange] | None = None,
) -> TraceProfile:
    """Cluster the indexed traces and map their typed relationships.

    A response with no parseable JSON (after one retry) yields the empty
    profile; the library build then proceeds with "None identified" slots.
    """

    if not indexed:
        raise ValueError("cannot profile an empty trace set")
    prompt = render_profile_prompt(indexed)
    try:
        obj = _json_with_retry(backend, Stage.PROFILE, prompt, log)
    except NoJsonFound:
        logger.warning("profile stage produced no JSON after retry; using empty profile")
        return TraceProfile.empty()
    profile, _notes = parse_profile_payload(obj, indexed.names())
    return profile


def render_library_prompt(
    previous: InsightLibrary,
    indexed: IndexedTraceSet,
    profile: TraceProfile,
    max_insights: int | None = None,
) -> str:
    """Render the library-construction prompt.

    The profile output is re-validated domain data here (never raw model
    JSON), serialized freshly before being spliced in. When ``max_insights``
    is set, the "proper number of insights" phrase becomes the explicit
    quantity.
    """

    previous_text = (
        json.dumps(dict(previous.entries), ensure_ascii=False, indent=2)
        if previous
        else "None"
    )
    clusters_text = (
        json.dumps([c.to_dict() for c in profile.clusters], ensure_ascii=False, indent=2)
        if profile.clusters
        else "None identified"
    )
    relationships_json = (
        json.dumps([r.to_dict() for r in profile.relationships], ensure_ascii=False, indent=2)
        if profile.relationships
        else "None identified"
    )
    budget = (
        prompts.DEFAULT_INSIGHT_BUDGET
        if max_insights is None
        else f"at most {max_insights} insights"
    )
    return prompts.fill(
        prompts.LIBRARY_PROMPT,
        previous_library=previous_text,
        traces_text=render_traces(indexed),
        clusters_text=clusters_text,
        relationships_json=relationships_json,
        insight_budget=budget,
    )


def build_library(
    previous: InsightLibrary,
    indexed: IndexedTraceSet,
    profile: TraceProfile,
    backend: ChatBackend,
    max_insights: int | None = None,
    log: list[ChatExchange] | None = None,
) -> InsightLibrary:
    """Distill the next library version from traces and their profile.

    Keys are repaired to the ``insight_`` prefix and values flattened to
    strings before construction, so the returned library always validates.
    If ``max_insights`` is exceeded anyway, entries are truncated in
    insertion order. A build with no parseable JSON carries the previous
    entries forward; either way the version increments by exactly one.
    """

    prompt = render_library_prompt(previous, indexed, profile, max_insights)
    try:
        obj = _json_with_retry(backend, Stage.BUILD_LIBRARY, prompt, log)
    except NoJsonFound:
        logger.warning("library build produced no JSON after retry; carrying previous library forward")
        return previous.bump()
    entries, _notes = parse_flat_entries(obj, INSIGHT_PREFIX)
    if max_insights is not None and len(entries) > max_insights:
        logger.warning(
            "library build returned %d insights, truncating to %d", len(entries), max_insights
        )
        entries = dict(list(entries.items())[:max_insights])
    return previous.bump(entries)


def aggregate_round(
    previous: InsightLibrary,
    uploads: Sequence[TraceSet],
    backend: ChatBackend,
    max_insights: int | None = None,
    log: list[ChatExchange] | None = None,
) -> tuple[InsightLibrary, TraceProfile, IndexedTraceSet]:
    """One full server pass: index -> profile -> build.

    Returns all intermediate artifacts for persistence. A round with zero
    uploaded traces skips the model calls and re-broadcasts the previous
    entries at the next version.
    """

    indexed = index_traces(uploads)
    if not indexed:
        logger.info("no traces uploaded; carrying library v%d forward", previous.version)
        return previous.bump(), TraceProfile.empty(), indexed
    profile = profile_traces(indexed, backend, log=log)
    library = build_library(previous, indexed, profile, backend, max_insights, log=log)
    return library, profile, indexed
