"""Benchmark ingestion, experiment drivers, and report rendering.

Benchmarks arrive as JSONL with ``{id, statement, gold_answer?}`` rows; the
appropriate domain template is appended at load time so the rest of the
pipeline only ever sees fully assembled problem prompts. Reports are pure
functions of a run directory.
"""

from __future__ import annotations

import csv
import dataclasses
import io
import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

from . import prompts
from .aggregator import index_traces
from .audit import PrivacyReport, privacy_report
from .domain import DomainKind, InsightLibrary, Problem, TraceSet
from .errors import DuplicateId, MalformedRow, MissingArtifacts
from .federation import (
    FederationConfig,
    FederationResult,
    ParticipationPolicy,
    RoundRecord,
    run_federation,
)
from .transport import ChatBackend

logger = logging.getLogger(__name__)

_TEMPLATES: dict[DomainKind, str] = {
    DomainKind.MATH: prompts.MATH_TEMPLATE,
    DomainKind.SCIENCE_QA: prompts.SCIENCE_QA_TEMPLATE,
    DomainKind.CODING: prompts.CODING_TEMPLATE,
}


def assemble_statement(
    domain_kind: DomainKind,
    statement: str,
    *,
    problem_id: str = "",
    payload: str | None = None,
) -> str:
    """Attach the domain's answer-format template to a raw benchmark query."""
    if domain_kind is DomainKind.PAPER_READING:
        return prompts.fill(
            prompts.PAPER_READING_TEMPLATE,
            paper_name=problem_id or statement,
            paper_content=payload if payload is not None else statement,
        )
    template = _TEMPLATES.get(domain_kind, "")
    return statement + template


@dataclass(frozen=True)
class BenchmarkManifest:
    name: str
    domain_kind: DomainKind
    tasks: tuple[Problem, ...]
    source_path: str

    def __len__(self) -> int:
        return len(self.tasks)


def load_benchmark(path: str | Path, domain_kind: DomainKind | str) -> BenchmarkManifest:
    """Load a JSONL benchmark and assemble its problem prompts.

    Gradable kinds (math, science QA) must carry gold answers. Duplicate
    ids and malformed rows fail loudly with their line number; an empty
    file loads as an empty manifest with a warning.
    """

    domain_kind = DomainKind(domain_kind)
    path = Path(path)
    tasks: list[Problem] = []
    seen: set[str] = set()
    with open(path, encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                row = json.loads(line)
            except json.JSONDecodeError as err:
                raise MalformedRow(f"invalid JSON ({err})", line=line_no) from err
            if not isinstance(row, dict) or "id" not in row or "statement" not in row:
                raise MalformedRow("row needs 'id' and 'statement' fields", line=line_no)
            problem_id = str(row["id"])
            if problem_id in seen:
                raise DuplicateId(f"duplicate problem id {problem_id!r} at line {line_no}")
            seen.add(problem_id)
            gold = row.get("gold_answer")
            if gold is None and domain_kind in (DomainKind.MATH, DomainKind.SCIENCE_QA):
                raise MalformedRow(
                    f"gradable kind {domain_kind.value} requires gold_answer", line=line_no
                )
            payload_path = row.get("payload_path")
            payload = None
            if payload_path:
                payload = Path(payload_path).read_text(encoding="utf-8")
            try:
                tasks.append(
                    Problem(
                        id=problem_id,
                        domain_kind=domain_kind,
                        statement=assemble_statement(
                            domain_kind, row["statement"],
                            problem_id=problem_id, payload=payload,
                        ),
                        gold_answer=str(gold) if gold is not None else None,
                        payload_path=payload_path,
                    )
                )
            except ValueError as err:
                raise MalformedRow(str(err), line=line_no) from err
    if not tasks:
        logger.warning("benchmark %s is empty", path)
    return BenchmarkManifest(
        name=path.stem,
        domain_kind=domain_kind,
        tasks=tuple(tasks),
        source_path=str(path),
    )


# ---------------------------------------------------------------------------
# Run-directory access


def _round_dirs(run_dir: Path) -> list[Path]:
    dirs = []
    for child in run_dir.iterdir():
        m = re.fullmatch(r"round_(\d+)", child.name)
        if m and child.is_dir():
            dirs.append((int(m.group(1)), child))
    return [d for _, d in sorted(dirs)]


def load_round_records(run_dir: str | Path) -> list[RoundRecord]:
    run_dir = Path(run_dir)
    records = []
    for round_dir in _round_dirs(run_dir):
        record_path = round_dir / "record.json"
        if record_path.exists():
            with open(record_path, encoding="utf-8") as fh:
                records.append(RoundRecord.from_dict(json.load(fh)))
    return records


def load_final_library(run_dir: str | Path) -> InsightLibrary | None:
    run_dir = Path(run_dir)
    best: tuple[int, Path] | None = None
    for round_dir in _round_dirs(run_dir):
        for lib_path in round_dir.glob("library_v*.json"):
            version = int(lib_path.stem.split("_v")[1])
            if best is None or version > best[0]:
                best = (version, lib_path)
    if best is None:
        return None
    with open(best[1], encoding="utf-8") as fh:
        return InsightLibrary.from_dict(json.load(fh))


def load_all_traces(run_dir: str | Path) -> list[TraceSet]:
    """Every round's uploaded traces, one TraceSet per round, with original
    (pre-indexing) names restored from the origin map."""
    from .domain import ReasoningTrace

    out = []
    for round_dir in _round_dirs(Path(run_dir)):
        indexed_path = round_dir / "indexed_traces.json"
        if not indexed_path.exists():
            continue
        with open(indexed_path, encoding="utf-8") as fh:
            data = json.load(fh)
        traces = []
        for row in data["traces"]:
            origin = data["origin_map"].get(row["name"], {})
            traces.append(
                ReasoningTrace(
                    name=origin.get("original_name", row["name"]),
                    description=row["description"],
                    agent_id=row["agent_id"],
                    round=row["round"],
                    problem_id=row["problem_id"],
                )
            )
        out.append(TraceSet(tuple(traces)))
    return out


def load_problems(run_dir: str | Path) -> list[Problem]:
    path = Path(run_dir) / "problems.json"
    if not path.exists():
        raise MissingArtifacts(["problems.json"])
    with open(path, encoding="utf-8") as fh:
        data = json.load(fh)
    return [Problem.from_dict(p) for p in data.values()]


def audit_run(run_dir: str | Path, n: int = 4) -> PrivacyReport:
    """Audit a completed run: all uploaded traces and the final library
    against the run's problems and gold answers."""
    run_dir = Path(run_dir)
    trace_sets = load_all_traces(run_dir)
    library = load_final_library(run_dir)
    missing = []
    if library is None:
        missing.append("library_v*.json")
    if not (run_dir / "problems.json").exists():
        missing.append("problems.json")
    if missing:
        raise MissingArtifacts(missing)
    report = privacy_report(
        index_traces(trace_sets), load_problems(run_dir), library, n
    )
    _write_json(run_dir / "audit.json", report.to_dict())
    return report


# ---------------------------------------------------------------------------
# Experiment drivers


@dataclass(frozen=True)
class AblationRow:
    """One agent's four deltas, paper-table sign convention: positive means
    the variant beat the baseline."""

    agent_id: str
    include_vs_isolated: float
    include_vs_full: float
    exclude_vs_isolated: float
    exclude_vs_full: float

    def to_dict(self) -> dict[str, float | str]:
        return {
            "agent_id": self.agent_id,
            "include_vs_isolated": self.include_vs_isolated,
            "include_vs_full": self.include_vs_full,
            "exclude_vs_isolated": self.exclude_vs_isolated,
            "exclude_vs_full": self.exclude_vs_full,
        }


@dataclass(frozen=True)
class AblationTable:
    rows: tuple[AblationRow, ...]
    isolated_accuracy: float
    full_accuracy: float

    def to_dict(self) -> dict:
        return {
            "isolated_accuracy": self.isolated_accuracy,
            "full_accuracy": self.full_accuracy,
            "rows": [r.to_dict() for r in self.rows],
        }


BackendFactory = Callable[[], Mapping[str, ChatBackend]]


def _with_policy(
    config: FederationConfig, policy: ParticipationPolicy, run_dir: Path
) -> FederationConfig:
    return dataclasses.replace(
        config, participation=policy, run_dir=str(run_dir)
    )


def _final_mean_accuracy(result: FederationResult) -> float:
    if not result.records:
        return 0.0
    return result.records[-1].mean_accuracy


def run_ablation_include_exclude(
    config: FederationConfig,
    make_backends: BackendFactory | None = None,
) -> AblationTable:
    """Per-agent contribution ablation.

    Runs one full-participation federation plus, per agent, an include-one
    and an exclude-one federation. Each cell is the final-round mean
    accuracy across all agents (everyone is evaluated with the resulting
    library); deltas are against the isolated baseline (the full run's
    round 1, solved with the empty library) and against full-participation
    performance. A failed cell is recorded as such without sinking the
    completed ones.
    """

    if len(config.agents) < 2:
        raise ValueError("include/exclude ablation needs at least 2 agents")
    base_dir = Path(config.run_dir)

    def fresh_backends() -> Mapping[str, ChatBackend] | None:
        return make_backends() if make_backends is not None else None

    full = run_federation(
        _with_policy(config, ParticipationPolicy.all(), base_dir / "full"),
        backends=fresh_backends(),
    )
    if not full.records:
        raise MissingArtifacts(["full-participation run produced no rounds"])
    isolated_acc = full.records[0].mean_accuracy
    full_acc = _final_mean_accuracy(full)

    rows = []
    for agent in config.agents:
        aid = agent.agent_id
        cells: dict[str, float] = {}
        for mode, policy in (
            ("include", ParticipationPolicy.include_one(aid)),
            ("exclude", ParticipationPolicy.exclude_one(aid)),
        ):
            try:
                result = run_federation(
                    _with_policy(config, policy, base_dir / f"{mode}_{aid}"),
                    backends=fresh_backends(),
                )
                cells[mode] = _final_mean_accuracy(result)
            except Exception as err:  # cell isolation: record and continue
                logger.error("ablation cell %s/%s failed: %s", mode, aid, err)
                cells[mode] = float("nan")
        rows.append(
            AblationRow(
                agent_id=aid,
                include_vs_isolated=cells["include"] - isolated_acc,
                include_vs_full=cells["include"] - full_acc,
                exclude_vs_isolated=cells["exclude"] - isolated_acc,
                exclude_vs_full=cells["exclude"] - full_acc,
            )
        )
    return AblationTable(
        rows=tuple(rows), isolated_accuracy=isolated_acc, full_accuracy=full_acc
    )


@dataclass(frozen=True)
class SweepRow:
    max_insights: int
    insight_count: int
    mean_accuracy: float
    mean_completion_tokens: float
    library_version: int
    failure: str | None = None

    def to_dict(self) -> dict:
        return {
            "max_insights": self.max_insights,
            "insight_count": self.insight_count,
            "mean_accuracy": self.mean_accuracy,
            "mean_completion_tokens": self.mean_completion_tokens,
            "library_version": self.library_version,
            "failure": self.failure,
        }


@dataclass(frozen=True)
class RepeatSummary:
    repeats: int
    final_accuracies: tuple[float, ...]
    mean_accuracy: float
    std_accuracy: float

    def to_dict(self) -> dict:
        return {
            "repeats": self.repeats,
            "final_accuracies": list(self.final_accuracies),
            "mean_accuracy": self.mean_accuracy,
            "std_accuracy": self.std_accuracy,
        }


def run_repeated(
    config: FederationConfig,
    repeats: int,
    make_backends: BackendFactory | None = None,
) -> tuple[list[FederationResult], RepeatSummary]:
    """Run the same federation ``repeats`` times under derived seeds.

    Repeat k runs with seed ``config.seed + k`` under ``repeat_<k>/`` and the
    final-round mean accuracies are reported as mean plus-minus std. The
    repeat count is an experimental choice, so there is no per-application
    default; callers pick it.
    """

    if repeats < 1:
        raise ValueError("repeats must be >= 1")
    import statistics

    base = Path(config.run_dir)
    results: list[FederationResult] = []
    finals: list[float] = []
    for k in range(repeats):
        run_config = dataclasses.replace(
            config, seed=config.seed + k, run_dir=str(base / f"repeat_{k}")
        )
        result = run_federation(
            run_config,
            backends=make_backends() if make_backends is not None else None,
        )
        results.append(result)
        finals.append(_final_mean_accuracy(result))
    summary = RepeatSummary(
        repeats=repeats,
        final_accuracies=tuple(finals),
        mean_accuracy=statistics.mean(finals),
        std_accuracy=statistics.stdev(finals) if len(finals) > 1 else 0.0,
    )
    _write_json(base / "repeats_summary.json", summary.to_dict())
    return results, summary


def run_library_size_sweep(
    config: FederationConfig,
    sizes: Sequence[int],
    make_backends: BackendFactory | None = None,
) -> list[SweepRow]:
    """One federation per library-size cap; emits curve data of accuracy and
    library size against the cap."""

    if not sizes:
        raise ValueError("sweep needs at least one size")
    base_dir = Path(config.run_dir)
    rows = []
    for size in sizes:
        run_config = dataclasses.replace(
            config, max_insights=int(size), run_dir=str(base_dir / f"size_{size}")
        )
        try:
            result = run_federation(
                run_config,
                backends=make_backends() if make_backends is not None else None,
            )
            last = result.records[-1] if result.records else None
            rows.append(
                SweepRow(
                    max_insights=int(size),
                    insight_count=len(result.library),
                    mean_accuracy=last.mean_accuracy if last else 0.0,
                    mean_completion_tokens=(
                        sum(s.mean_completion_tokens for s in last.per_agent.values())
                        / len(last.per_agent)
                        if last and last.per_agent
                        else 0.0
                    ),
                    library_version=result.library.version,
                )
            )
        except Exception as err:  # per-size isolation
            logger.error("sweep cell size=%s failed: %s", size, err)
            rows.append(
                SweepRow(
                    max_insights=int(size),
                    insight_count=0,
                    mean_accuracy=0.0,
                    mean_completion_tokens=0.0,
                    library_version=0,
                    failure=str(err),
                )
            )
    return rows


# ---------------------------------------------------------------------------
# Report rendering


def render_text_table(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    """Fixed-width plain-text table."""
    cells = [[str(h) for h in headers]] + [[str(c) for c in row] for row in rows]
    widths = [max(len(row[i]) for row in cells) for i in range(len(headers))]
    lines = []
    for idx, row in enumerate(cells):
        lines.append("  ".join(cell.ljust(widths[i]) for i, cell in enumerate(row)).rstrip())
        if idx == 0:
            lines.append("  ".join("-" * w for w in widths))
    return "\n".join(lines)


def _csv_text(headers: Sequence[str], rows: Sequence[Sequence[Any]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf)
    writer.writerow(headers)
    writer.writerows(rows)
    return buf.getvalue()


def _write_json(path: Path, payload: Any) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, ensure_ascii=False, indent=2)
        fh.write("\n")


def _write_text(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


@dataclass(frozen=True)
class ReportBundle:
    paths: tuple[str, ...]
    summary_table: str
    privacy_table: str | None = None


def render_reports(run_dir: str | Path, out_dir: str | Path | None = None) -> ReportBundle:
    """Render accuracy/token/loop tables, the round-trend series, and (when
    audit artifacts exist) the privacy table for one run.

    Outputs land under ``<out_dir>/`` (default ``<run_dir>/reports``) as
    CSV, JSON, and plain-text tables. Run artifacts are only read.
    """

    run_dir = Path(run_dir)
    records = load_round_records(run_dir)
    if not records:
        raise MissingArtifacts([str(run_dir / "round_1" / "record.json")])
    out = Path(out_dir) if out_dir is not None else run_dir / "reports"
    paths: list[str] = []

    headers = ["round", "library_version", "mean_accuracy",
               "mean_completion_tokens", "total_loops", "mean_loops_per_task"]
    trend_rows = []
    for record in records:
        from .metrics import summarize

        summary = summarize([record])
        trend_rows.append([
            record.round,
            record.library_version,
            f"{summary.mean_accuracy:.4f}",
            f"{summary.mean_completion_tokens:.1f}",
            summary.total_loops,
            f"{summary.mean_loops_per_task:.3f}",
        ])
    summary_table = render_text_table(headers, trend_rows)
    _write_text(out / "trend.csv", _csv_text(headers, trend_rows))
    _write_text(out / "trend.txt", summary_table + "\n")
    _write_json(out / "trend.json", [dict(zip(headers, row)) for row in trend_rows])
    paths += [str(out / "trend.csv"), str(out / "trend.txt"), str(out / "trend.json")]

    bench_headers = ["agent", "round", "accuracy", "mean_completion_tokens",
                     "loop_count", "trace_count"]
    bench_rows = []
    for record in records:
        for agent_id, stats in record.per_agent.items():
            bench_rows.append([
                agent_id,
                record.round,
                f"{stats.accuracy:.4f}",
                f"{stats.mean_completion_tokens:.1f}",
                stats.loop_count,
                stats.trace_count,
            ])
    _write_text(out / "accuracy.csv", _csv_text(bench_headers, bench_rows))
    _write_text(out / "accuracy.txt", render_text_table(bench_headers, bench_rows) + "\n")
    _write_json(out / "accuracy.json", [dict(zip(bench_headers, row)) for row in bench_rows])
    paths += [str(out / "accuracy.csv"), str(out / "accuracy.txt"), str(out / "accuracy.json")]

    privacy_table = None
    audit_path = run_dir / "audit.json"
    if audit_path.exists():
        with open(audit_path, encoding="utf-8") as fh:
            audit_data = json.load(fh)
        privacy_table = format_privacy_table(audit_data)
        _write_text(out / "privacy.txt", privacy_table + "\n")
        _write_json(out / "privacy.json", audit_data)
        privacy_headers, privacy_row = _privacy_row(audit_data)
        _write_text(out / "privacy.csv", _csv_text(privacy_headers, [privacy_row]))
        paths += [
            str(out / "privacy.txt"),
            str(out / "privacy.json"),
            str(out / "privacy.csv"),
        ]

    return ReportBundle(paths=tuple(paths), summary_table=summary_table,
                        privacy_table=privacy_table)


def _privacy_row(audit_data: Mapping[str, Any]) -> tuple[list[str], list[Any]]:
    headers = ["#problems", "#tokens_traces", "#tokens_library", "#insights",
               "jaccard_traces_vs_problems", "jaccard_library_vs_problems_and_answers"]
    display = audit_data.get("display", {})
    row = [
        audit_data.get("problem_count", 0),
        audit_data.get("trace_token_count", 0),
        audit_data.get("library_token_count", 0),
        audit_data.get("insight_count", 0),
        display.get("jaccard_traces_vs_problems",
                    f"{audit_data['jaccard_traces_vs_problems']:.3f}"),
        display.get("jaccard_library_vs_problems_and_answers",
                    f"{audit_data['jaccard_library_vs_problems_and_answers']:.3f}"),
    ]
    return headers, row


def format_privacy_table(audit_data: Mapping[str, Any]) -> str:
    headers, row = _privacy_row(audit_data)
    return render_text_table(headers, [row])


def format_ablation_table(table: AblationTable) -> str:
    headers = ["agent", "include Δisolated", "include Δfull",
               "exclude Δisolated", "exclude Δfull"]
    rows = [
        [
            r.agent_id,
            f"{r.include_vs_isolated:+.3f}",
            f"{r.include_vs_full:+.3f}",
            f"{r.exclude_vs_isolated:+.3f}",
            f"{r.exclude_vs_full:+.3f}",
        ]
        for r in table.rows
    ]
    return render_text_table(headers, rows)
