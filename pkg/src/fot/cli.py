"""Command-line surface: run, report, audit, judge, ablate, sweep."""

from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path
from typing import Any, Mapping

from . import harness
from .agent import AgentConfig, ReasoningStrategy
from .errors import FotError
from .federation import FederationConfig, ParticipationPolicy, run_federation
from .guidance import guidance_rate, judge_guidance
from .harness import (
    format_ablation_table,
    load_benchmark,
    render_text_table,
    run_ablation_include_exclude,
    run_library_size_sweep,
)
from .transport import backend_spec_from_dict, create_backend

logger = logging.getLogger(__name__)


def _load_config_file(path: str | Path) -> dict[str, Any]:
    path = Path(path)
    if path.suffix.lower() == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ImportError:
            import tomli as tomllib
        with open(path, "rb") as fh:
            return tomllib.load(fh)
    with open(path, encoding="utf-8") as fh:
        return json.load(fh)


def build_federation_config(
    raw: Mapping[str, Any],
    *,
    base_dir: Path,
    rounds: int | None = None,
    participation: str | None = None,
    seed: int | None = None,
    out: str | None = None,
) -> FederationConfig:
    """Resolve a raw config mapping (plus CLI overrides) into a runnable
    FederationConfig, loading every referenced benchmark."""

    def spec_with_resolved_paths(data: Mapping[str, Any]):
        spec = backend_spec_from_dict(data)
        if spec.script_path and not Path(spec.script_path).is_absolute():
            import dataclasses

            spec = dataclasses.replace(spec, script_path=str(base_dir / spec.script_path))
        return spec

    named_backends = {
        name: spec_with_resolved_paths(spec)
        for name, spec in (raw.get("backends") or {}).items()
    }

    def resolve_backend(value: Any) -> Any:
        if isinstance(value, str):
            try:
                return named_backends[value]
            except KeyError:
                raise FotError(f"unknown named backend {value!r}")
        return spec_with_resolved_paths(value)

    tasks: dict[str, Any] = {}
    agents: list[AgentConfig] = []
    for entry in raw["agents"]:
        bench = entry["benchmark"]
        manifest = load_benchmark(
            base_dir / bench["path"] if not Path(bench["path"]).is_absolute() else bench["path"],
            bench["domain_kind"],
        )
        task_ids = []
        for problem in manifest.tasks:
            if problem.id in tasks:
                raise FotError(f"task id {problem.id!r} appears in two benchmarks")
            tasks[problem.id] = problem
            task_ids.append(problem.id)
        agents.append(
            AgentConfig(
                agent_id=entry["agent_id"],
                backend=resolve_backend(entry["backend"]),
                task_ids=tuple(task_ids),
                reasoning_strategy=ReasoningStrategy(
                    entry.get("reasoning_strategy", "native")
                ),
            )
        )

    run_dir = out or raw.get("run_dir") or "runs/fot"
    policy_text = participation or raw.get("participation", "all")
    return FederationConfig(
        agents=tuple(agents),
        server_backend=resolve_backend(raw["server_backend"]),
        rounds=int(rounds if rounds is not None else raw.get("rounds", 3)),
        participation=ParticipationPolicy.parse(policy_text),
        seed=int(seed if seed is not None else raw.get("seed", 0)),
        run_dir=str(run_dir),
        tasks=tasks,
        convergence_delta=raw.get("convergence_delta"),
        max_insights=raw.get("max_insights"),
        parallelism=int(raw.get("parallelism", 1)),
    )


def _cmd_run(args: argparse.Namespace) -> int:
    raw = _load_config_file(args.config)
    config = build_federation_config(
        raw,
        base_dir=Path(args.config).parent,
        rounds=args.rounds,
        participation=args.participation,
        seed=args.seed,
        out=args.out,
    )
    if args.repeats > 1:
        _results, summary = harness.run_repeated(config, args.repeats)
        print(f"{summary.repeats} repeats: final accuracy "
              f"{summary.mean_accuracy:.4f} ± {summary.std_accuracy:.4f}")
        print(f"artifacts: {config.run_dir}")
        return 0
    result = run_federation(config)
    print(f"run complete: {result.rounds_completed} round(s), "
          f"library v{result.library.version} with {len(result.library)} insight(s)")
    rows = [
        [r.round, r.library_version, f"{r.mean_accuracy:.4f}", len(r.participants)]
        for r in result.records
    ]
    print(render_text_table(["round", "library", "mean_accuracy", "participants"], rows))
    print(f"artifacts: {result.run_dir}")
    return 0


def _cmd_report(args: argparse.Namespace) -> int:
    bundle = harness.render_reports(args.run, args.out)
    print(bundle.summary_table)
    if bundle.privacy_table:
        print()
        print(bundle.privacy_table)
    print()
    for path in bundle.paths:
        print(f"wrote {path}")
    return 0


def _cmd_audit(args: argparse.Namespace) -> int:
    report = harness.audit_run(args.run, n=args.n)
    print(harness.format_privacy_table(report.to_dict()))
    print()
    print(f"full-precision figures: "
          f"traces vs problems = {report.jaccard_traces_vs_problems!r}, "
          f"library vs problems+answers = {report.jaccard_library_vs_problems_and_answers!r}")
    print(f"wrote {Path(args.run) / 'audit.json'}")
    return 0


def _cmd_judge(args: argparse.Namespace) -> int:
    from .domain import InsightLibrary

    with open(args.library, encoding="utf-8") as fh:
        library = InsightLibrary.from_dict(json.load(fh))
    backend = create_backend(backend_spec_from_dict(_load_config_file(args.backend)))

    tiers: dict[str, str] = {}
    if args.tiers:
        with open(args.tiers, encoding="utf-8", newline="") as fh:
            for row in csv.DictReader(fh):
                tiers[row["paper_id"]] = row["tier"]

    verdicts = []
    papers = sorted(Path(args.papers).glob("*.txt"))
    if not papers:
        print(f"no .txt papers found under {args.papers}", file=sys.stderr)
        return 1
    for paper_path in papers:
        verdict = judge_guidance(
            library,
            paper_path.read_text(encoding="utf-8"),
            backend,
            paper_id=paper_path.stem,
        )
        verdicts.append(verdict)
    report = guidance_rate(verdicts, tiers or None)

    out_path = Path(args.out or "guidance_report.json")
    payload = {
        "report": report.to_dict(),
        "verdicts": [v.to_dict() for v in verdicts],
    }
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(payload, indent=2, ensure_ascii=False) + "\n",
                        encoding="utf-8")
    headers = ["tier", "guided", "total", "rate"]
    rows = [["overall", report.guided_count, report.total, f"{report.overall_rate:.3f}"]]
    for tier, rate in report.tier_rates.items():
        count = report.tier_counts[tier]
        rows.append([tier, round(rate * count), count, f"{rate:.3f}"])
    print(render_text_table(headers, rows))
    if report.excluded_count:
        print(f"excluded {report.excluded_count} failed judgment(s) from denominators")
    print(f"wrote {out_path}")
    return 0


def _cmd_ablate(args: argparse.Namespace) -> int:
    raw = _load_config_file(args.config)
    config = build_federation_config(
        raw, base_dir=Path(args.config).parent, out=args.out, seed=args.seed
    )
    table = run_ablation_include_exclude(config)
    print(format_ablation_table(table))
    out_path = Path(config.run_dir) / "ablation.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(table.to_dict(), indent=2) + "\n", encoding="utf-8")
    print(f"wrote {out_path}")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    raw = _load_config_file(args.config)
    config = build_federation_config(
        raw, base_dir=Path(args.config).parent, out=args.out, seed=args.seed
    )
    sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    rows = run_library_size_sweep(config, sizes)
    headers = ["max_insights", "insight_count", "mean_accuracy", "mean_completion_tokens"]
    print(render_text_table(
        headers,
        [[r.max_insights, r.insight_count, f"{r.mean_accuracy:.4f}",
          f"{r.mean_completion_tokens:.1f}"] for r in rows],
    ))
    out_path = Path(config.run_dir) / "sweep.json"
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(
        json.dumps([r.to_dict() for r in rows], indent=2) + "\n", encoding="utf-8"
    )
    print(f"wrote {out_path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fot",
        description="Federated text-level insight sharing for LLM agents",
    )
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a federation")
    run.add_argument("--config", required=True, help="JSON or TOML config file")
    run.add_argument("--rounds", type=int, default=None)
    run.add_argument("--participation", default=None,
                     help="all | fraction:P | include:ID | exclude:ID")
    run.add_argument("--seed", type=int, default=None)
    run.add_argument("--out", default=None, help="run directory")
    run.add_argument("--repeats", type=int, default=1,
                     help="repeat the run under derived seeds and report mean±std")
    run.set_defaults(func=_cmd_run)

    report = sub.add_parser("report", help="render tables for a completed run")
    report.add_argument("--run", required=True, help="run directory")
    report.add_argument("--out", default=None, help="report output directory")
    report.set_defaults(func=_cmd_report)

    audit = sub.add_parser("audit", help="shingle-overlap privacy audit of a run")
    audit.add_argument("--run", required=True, help="run directory")
    audit.add_argument("--n", type=int, default=4, help="shingle width")
    audit.set_defaults(func=_cmd_audit)

    judge = sub.add_parser("judge", help="judge paper guidance against a library")
    judge.add_argument("--library", required=True, help="library_v*.json file")
    judge.add_argument("--papers", required=True, help="directory of plain-text papers")
    judge.add_argument("--tiers", default=None, help="CSV with paper_id,tier columns")
    judge.add_argument("--backend", required=True, help="JSON file with the judge backend spec")
    judge.add_argument("--out", default=None, help="verdict/report output path")
    judge.set_defaults(func=_cmd_judge)

    ablate = sub.add_parser("ablate", help="include-one / exclude-one ablation")
    ablate.add_argument("--config", required=True)
    ablate.add_argument("--seed", type=int, default=None)
    ablate.add_argument("--out", default=None, help="base directory for ablation runs")
    ablate.set_defaults(func=_cmd_ablate)

    sweep = sub.add_parser("sweep", help="library-size sweep")
    sweep.add_argument("--config", required=True)
    sweep.add_argument("--sizes", required=True, help="comma-separated caps, e.g. 10,50,100")
    sweep.add_argument("--seed", type=int, default=None)
    sweep.add_argument("--out", default=None, help="base directory for sweep runs")
    sweep.set_defaults(func=_cmd_sweep)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return args.func(args)
    except FotError as err:
        print(f"error: {err}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    raise SystemExit(main())
