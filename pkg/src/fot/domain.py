"""Core data model and contract validation.

Everything agents upload and the server broadcasts flows through the types
here: problems, solutions, reasoning traces, trace profiles, and the insight
library. All types are immutable after construction and validated on
construction, so downstream code never sees a trace without its ``trace_``
prefix or a library value that is not a flat string.
"""

from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Any, Iterator, Mapping

from .errors import NoJsonFound

logger = logging.getLogger(__name__)

TRACE_PREFIX = "trace_"
INSIGHT_PREFIX = "insight_"
_KNOWN_PREFIXES = (TRACE_PREFIX, INSIGHT_PREFIX)


class DomainKind(str, Enum):
    MATH = "math"
    SCIENCE_QA = "science_qa"
    CODING = "coding"
    PAPER_READING = "paper_reading"
    FREEFORM = "freeform"


#: Kinds whose answers the built-in grader can check mechanically.
GRADABLE_KINDS = frozenset({DomainKind.MATH, DomainKind.SCIENCE_QA})


class UsageSource(str, Enum):
    PROVIDER_REPORTED = "provider_reported"
    APPROXIMATED = "approximated"


@dataclass(frozen=True)
class UsageStats:
    prompt_tokens: int
    completion_tokens: int
    source: UsageSource = UsageSource.APPROXIMATED

    def __post_init__(self) -> None:
        if self.prompt_tokens < 0 or self.completion_tokens < 0:
            raise ValueError("token counts must be >= 0")

    def to_dict(self) -> dict[str, Any]:
        return {
            "prompt_tokens": self.prompt_tokens,
            "completion_tokens": self.completion_tokens,
            "source": self.source.value,
        }


@dataclass(frozen=True)
class Problem:
    """One task instance as presented to an agent.

    ``statement`` is the full problem prompt, including any domain template
    suffix applied at ingestion (boxed-answer instruction for math, letter
    instruction for science QA, and so on).
    """

    id: str
    domain_kind: DomainKind
    statement: str
    gold_answer: str | None = None
    payload_path: str | None = None

    def __post_init__(self) -> None:
        if not self.id:
            raise ValueError("problem id must be non-empty")
        if not self.statement or not self.statement.strip():
            raise ValueError(f"problem {self.id!r}: statement must be non-empty")

    def to_dict(self) -> dict[str, Any]:
        return {
            "id": self.id,
            "domain_kind": self.domain_kind.value,
            "statement": self.statement,
            "gold_answer": self.gold_answer,
            "payload_path": self.payload_path,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Problem":
        return cls(
            id=str(data["id"]),
            domain_kind=DomainKind(data["domain_kind"]),
            statement=data["statement"],
            gold_answer=data.get("gold_answer"),
            payload_path=data.get("payload_path"),
        )


@dataclass(frozen=True)
class Solution:
    problem_id: str
    text: str
    usage: UsageStats


@dataclass(frozen=True)
class Reflection:
    problem_id: str
    text: str

    def __post_init__(self) -> None:
        if not self.text.strip():
            raise ValueError("reflection text must be non-empty")


@dataclass(frozen=True)
class ReasoningTrace:
    """One uploaded unit of abstracted problem-solving knowledge.

    Deliberately carries only the trace name, its description, and
    provenance metadata. There is no field for the problem statement,
    solution text, or reflection text; the upload payload cannot leak them
    structurally.
    """

    name: str
    description: str
    agent_id: str
    round: int
    problem_id: str

    def __post_init__(self) -> None:
        if not validate_trace_key(self.name):
            raise ValueError(f"invalid trace name {self.name!r}")
        if not isinstance(self.description, str):
            raise ValueError("trace description must be a flat string")
        if self.round < 1:
            raise ValueError("round must be >= 1")

    def to_dict(self) -> dict[str, Any]:
        return {
            "name": self.name,
            "description": self.description,
            "agent_id": self.agent_id,
            "round": self.round,
            "problem_id": self.problem_id,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "ReasoningTrace":
        return cls(
            name=data["name"],
            description=data["description"],
            agent_id=data["agent_id"],
            round=int(data["round"]),
            problem_id=data["problem_id"],
        )


@dataclass(frozen=True)
class TraceSet:
    """Ordered collection of reasoning traces, as uploaded by one agent.

    Duplicate names are allowed here; the server disambiguates them during
    indexing.
    """

    traces: tuple[ReasoningTrace, ...] = ()

    def __len__(self) -> int:
        return len(self.traces)

    def __iter__(self) -> Iterator[ReasoningTrace]:
        return iter(self.traces)

    def __bool__(self) -> bool:
        return bool(self.traces)

    def to_dicts(self) -> list[dict[str, Any]]:
        return [t.to_dict() for t in self.traces]

    @classmethod
    def from_dicts(cls, rows: list[Mapping[str, Any]]) -> "TraceSet":
        return cls(tuple(ReasoningTrace.from_dict(r) for r in rows))


class RelationshipType(str, Enum):
    PREREQUISITE = "prerequisite"
    COMPLEMENTARY = "complementary"
    ALTERNATIVE = "alternative"
    SIMILAR = "similar"
    DERIVED_FROM = "derived_from"
    COMPOSES_WITH = "composes_with"


@dataclass(frozen=True)
class Relationship:
    trace_a: str
    trace_b: str
    relationship_type: RelationshipType
    description: str = ""

    def __post_init__(self) -> None:
        if self.trace_a == self.trace_b:
            raise ValueError("relationship endpoints must differ")

    def to_dict(self) -> dict[str, Any]:
        return {
            "trace_a": self.trace_a,
            "trace_b": self.trace_b,
            "relationship_type": self.relationship_type.value,
            "description": self.description,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Relationship":
        return cls(
            trace_a=data["trace_a"],
            trace_b=data["trace_b"],
            relationship_type=RelationshipType(data["relationship_type"]),
            description=data.get("description", ""),
        )


@dataclass(frozen=True)
class Cluster:
    cluster_id: int
    cluster_name: str
    trace_names: tuple[str, ...]
    theme: str = ""

    def to_dict(self) -> dict[str, Any]:
        return {
            "cluster_id": self.cluster_id,
            "cluster_name": self.cluster_name,
            "trace_names": list(self.trace_names),
            "theme": self.theme,
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "Cluster":
        return cls(
            cluster_id=int(data["cluster_id"]),
            cluster_name=data["cluster_name"],
            trace_names=tuple(data["trace_names"]),
            theme=data.get("theme", ""),
        )


@dataclass(frozen=True)
class TraceProfile:
    clusters: tuple[Cluster, ...] = ()
    relationships: tuple[Relationship, ...] = ()

    @classmethod
    def empty(cls) -> "TraceProfile":
        return cls()

    def __bool__(self) -> bool:
        return bool(self.clusters or self.relationships)

    def to_dict(self) -> dict[str, Any]:
        return {
            "clusters": [c.to_dict() for c in self.clusters],
            "relationships": [r.to_dict() for r in self.relationships],
        }

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "TraceProfile":
        return cls(
            clusters=tuple(Cluster.from_dict(c) for c in data.get("clusters", [])),
            relationships=tuple(
                Relationship.from_dict(r) for r in data.get("relationships", [])
            ),
        )


@dataclass(frozen=True)
class InsightLibrary:
    """The federated global state: a versioned, ordered map of insights.

    Keys always carry the ``insight_`` prefix and values are flat strings;
    both are enforced at construction so no nested structure survives into
    a broadcast library. ``version`` equals the round that produced it
    (version 0 is the empty starting library).
    """

    version: int
    entries: dict[str, str] = field(default_factory=dict)

    def __post_init__(self) -> None:
        if self.version < 0:
            raise ValueError("library version must be >= 0")
        for key, value in self.entries.items():
            if not validate_insight_key(key):
                raise ValueError(f"invalid insight key {key!r}")
            if not isinstance(value, str):
                raise ValueError(f"insight {key!r}: value must be a flat string")

    @classmethod
    def empty(cls) -> "InsightLibrary":
        return cls(version=0, entries={})

    def __len__(self) -> int:
        return len(self.entries)

    def __bool__(self) -> bool:
        return bool(self.entries)

    def bump(self, entries: Mapping[str, str] | None = None) -> "InsightLibrary":
        """Next-version library: same entries unless new ones are given."""
        new_entries = dict(self.entries) if entries is None else dict(entries)
        return InsightLibrary(version=self.version + 1, entries=new_entries)

    def to_dict(self) -> dict[str, Any]:
        return {"version": self.version, "entries": dict(self.entries)}

    @classmethod
    def from_dict(cls, data: Mapping[str, Any]) -> "InsightLibrary":
        return cls(version=int(data["version"]), entries=dict(data["entries"]))


def validate_trace_key(name: object) -> bool:
    """True iff ``name`` starts with ``trace_`` and has a non-empty suffix."""
    return (
        isinstance(name, str)
        and name.startswith(TRACE_PREFIX)
        and len(name) > len(TRACE_PREFIX)
    )


def validate_insight_key(name: object) -> bool:
    """True iff ``name`` starts with ``insight_`` and has a non-empty suffix."""
    return (
        isinstance(name, str)
        and name.startswith(INSIGHT_PREFIX)
        and len(name) > len(INSIGHT_PREFIX)
    )


def repair_key(name: object, prefix: str) -> str | None:
    """Repair a model-emitted key to satisfy the given prefix contract.

    Rules, fixed ahead of time and applied in order:
      * a valid key is returned unchanged;
      * a wrong known prefix (``trace_`` vs ``insight_``) is swapped;
      * the bare prefix word followed by a space or hyphen is normalized to
        the underscore form (models echo the prompt's own loose example);
      * anything else is repaired by prefixing.

    Returns None for irreparable keys (empty, or nothing beyond the bare
    prefix word); callers must log the drop.
    """

    s = str(name).strip()
    if s.startswith(prefix):
        return s if len(s) > len(prefix) else None
    for other in _KNOWN_PREFIXES:
        if other != prefix and s.startswith(other):
            s = s[len(other):].strip()
            break
    else:
        bare = prefix[:-1]
        if len(s) > len(bare) and s[: len(bare)].lower() == bare and s[len(bare)] in " -":
            s = s[len(bare) + 1:].strip()
    if not s or s.lower() in (prefix[:-1].lower(), prefix.lower()):
        return None
    return prefix + s


def flatten_value(value: Any) -> str:
    """Coerce any JSON value to a single flat string.

    Strings pass through; nested structures and non-string scalars are
    serialized, so no insight or trace description is dropped just because
    the model ignored the no-nesting rule.
    """

    if isinstance(value, str):
        return value
    return json.dumps(value, ensure_ascii=False)


def parse_flat_entries(
    obj: Mapping[str, Any], prefix: str
) -> tuple[dict[str, str], list[str]]:
    """Turn a raw parsed model object into validated ``prefix``-keyed entries.

    Repairs key prefixes, flattens nested values, and drops irreparable or
    colliding keys. Returns the entries plus one human-readable note per
    repair/flatten/drop; callers log the notes so nothing is silently
    absorbed.
    """

    entries: dict[str, str] = {}
    notes: list[str] = []
    for raw_key, raw_value in obj.items():
        key = repair_key(raw_key, prefix)
        if key is None:
            notes.append(f"dropped irreparable key {raw_key!r}")
            continue
        if key != raw_key:
            notes.append(f"repaired key {raw_key!r} -> {key!r}")
        if not isinstance(raw_value, str):
            notes.append(f"flattened non-string value for {key!r}")
        value = flatten_value(raw_value)
        if key in entries:
            notes.append(f"dropped duplicate key {key!r} (kept first occurrence)")
            continue
        entries[key] = value
    for note in notes:
        logger.warning("%s", note)
    return entries, notes


_FENCE_OPEN = "```"


def _strip_code_fences(text: str) -> str:
    # Remove fence markers (and an optional language tag) without touching
    # the fenced content itself.
    out: list[str] = []
    i = 0
    while True:
        j = text.find(_FENCE_OPEN, i)
        if j == -1:
            out.append(text[i:])
            break
        out.append(text[i:j])
        k = j + len(_FENCE_OPEN)
        # Skip a language tag directly after an opening fence.
        while k < len(text) and (text[k].isalnum() or text[k] in "_+-"):
            k += 1
        i = k
    return "".join(out)


def extract_json_object(raw: str) -> dict[str, Any]:
    """Parse the first balanced top-level JSON object out of model output.

    Model responses routinely wrap the requested JSON in markdown fences or
    surrounding prose despite instructions not to. Fences are stripped, then
    every ``{`` is tried as the start of a JSON value until one parses as an
    object.

    Raises NoJsonFound when nothing parses; callers decide whether to retry
    the stage or record a failure.
    """

    if not raw or not raw.strip():
        raise NoJsonFound("empty response")
    text = _strip_code_fences(raw)
    decoder = json.JSONDecoder()
    idx = text.find("{")
    while idx != -1:
        try:
            obj, _end = decoder.raw_decode(text, idx)
        except json.JSONDecodeError:
            obj = None
        if isinstance(obj, dict):
            return obj
        idx = text.find("{", idx + 1)
    raise NoJsonFound("no balanced JSON object in response")


def render_library(library: InsightLibrary) -> str:
    """Render the library as one ``[Insight] name: description`` line per entry.

    Insertion order is preserved; the empty library renders as the empty
    string. This exact text is what gets spliced into agent prompts and
    exported as ``insight.md``.
    """

    return "\n".join(
        f"[Insight] {name}: {description}"
        for name, description in library.entries.items()
    )
