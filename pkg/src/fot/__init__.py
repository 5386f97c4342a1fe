"""Federated text-level insight sharing for LLM agents.

Decentralized agents solve their own tasks with a shared insight library,
upload abstracted reasoning traces instead of raw problem instances, and a
server distills the traces into the next library version broadcast each
round.
"""

from .domain import (
    DomainKind,
    InsightLibrary,
    Problem,
    ReasoningTrace,
    Reflection,
    Solution,
    TraceProfile,
    TraceSet,
    UsageStats,
    extract_json_object,
    render_library,
    validate_insight_key,
    validate_trace_key,
)
from .transport import (
    BackendKind,
    BackendSpec,
    ChatExchange,
    GenerationParams,
    ScriptedMockBackend,
    Stage,
    create_backend,
    default_stage_params,
)
from .agent import AgentConfig, run_local_round
from .aggregator import IndexedTraceSet, aggregate_round, index_traces
from .federation import (
    FederationConfig,
    FederationResult,
    ParticipationPolicy,
    RoundRecord,
    run_federation,
    select_participants,
)
from .metrics import detect_loops, extract_boxed, grade, summarize
from .audit import jaccard, privacy_report, shingles
from .guidance import guidance_rate, judge_guidance

__version__ = "0.1.0"

__all__ = [
    "AgentConfig",
    "BackendKind",
    "BackendSpec",
    "ChatExchange",
    "DomainKind",
    "FederationConfig",
    "FederationResult",
    "GenerationParams",
    "IndexedTraceSet",
    "InsightLibrary",
    "ParticipationPolicy",
    "Problem",
    "ReasoningTrace",
    "Reflection",
    "RoundRecord",
    "ScriptedMockBackend",
    "Solution",
    "Stage",
    "TraceProfile",
    "TraceSet",
    "UsageStats",
    "aggregate_round",
    "create_backend",
    "default_stage_params",
    "detect_loops",
    "extract_boxed",
    "extract_json_object",
    "grade",
    "guidance_rate",
    "index_traces",
    "jaccard",
    "judge_guidance",
    "privacy_report",
    "render_library",
    "run_federation",
    "run_local_round",
    "select_participants",
    "shingles",
    "summarize",
    "validate_insight_key",
    "validate_trace_key",
]
