"""Batch runs, persisted traces, re-evaluation, and the two ablation protocols."""

from __future__ import annotations

import json
import logging
import re
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple, Union

from .config import RunConfig
from .errors import ConfigError, InputError
from .evaluation import StageMetrics, render_table, stage_report
from .gateway import Gateway, gateway_from_config
from .pipeline import PipelineDeps, Switch, run_pipeline
from .policy import PolicyParams, load_policy
from .records import PipelineTrace, Question, load_dataset
from .retrieval import Index, build_index, ingest_corpus

logger = logging.getLogger(__name__)

_SAFE_RE = re.compile(r"[^A-Za-z0-9._-]")

# metrics each stage's switches may touch: everything from that stage down
METRIC_ORDER = ("extract", "group", "local_accuracy", "global_wif", "answer")
_FIRST_METRIC = {"extract": 0, "group": 1, "local": 2, "global": 3, "align": 4}


def upstream_metrics(switch: Switch) -> Tuple[str, ...]:
    """Metric columns a switch must leave unchanged."""
    return METRIC_ORDER[: _FIRST_METRIC[switch.stage]]


@dataclass
class Runtime:
    config: RunConfig
    questions: List[Question]
    index: Index
    gateway: Gateway
    base_gateway: Gateway
    policy: Optional[PolicyParams] = None

    @property
    def question_map(self) -> Dict[str, Question]:
        return {q.id: q for q in self.questions}

    def deps(self, switches: Sequence[Switch] = ()) -> PipelineDeps:
        cfg = self.config
        return PipelineDeps(
            index=self.index,
            gateway=self.gateway,
            base_gateway=self.base_gateway,
            selector=cfg.selector,
            policy=self.policy,
            grouping_mode=cfg.grouping_mode,
            tau=cfg.tau,
            keypoint_k=cfg.keypoint_k,
            group_k=cfg.group_k,
            option_k=cfg.option_k,
            rollouts=cfg.rollouts,
            seed=cfg.seed,
            config_fingerprint=cfg.fingerprint(switches),
            prompts_dir=str(cfg.prompts_dir) if cfg.prompts_dir else None,
        )

    @property
    def judge_gateway(self) -> Optional[Gateway]:
        return self.gateway if self.config.judge else None


def load_index(cfg: RunConfig) -> Index:
    if cfg.index is not None:
        return Index.load(cfg.index)
    corpus = ingest_corpus(cfg.corpus, cfg.chunking)
    return build_index(corpus)


def prepare(cfg: RunConfig) -> Runtime:
    """Load everything a run needs; any problem here is a config error."""
    questions = load_dataset(cfg.dataset)
    index = load_index(cfg)
    gateway = gateway_from_config(cfg.backend, cfg.stage_backends, cfg.base_dir)
    if cfg.base_backend is not None:
        base = gateway_from_config(cfg.base_backend, cfg.base_stage_backends, cfg.base_dir)
    else:
        base = gateway
    policy = None
    if cfg.policy is not None:
        policy, _ = load_policy(cfg.policy)
    elif cfg.selector == "policy":
        logger.warning("selector=policy without a trained policy file; using zero weights")
    return Runtime(cfg, questions, index, gateway, base, policy)


def run_questions(rt: Runtime, switches: Sequence[Switch] = (), jobs: int = 1) -> List[PipelineTrace]:
    deps = rt.deps(switches)
    if jobs > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            traces = list(pool.map(lambda q: run_pipeline(q, deps, switches), rt.questions))
    else:
        traces = [run_pipeline(q, deps, switches) for q in rt.questions]
    return sorted(traces, key=lambda t: t.question_id)


def report_for(rt: Runtime, traces: Sequence[PipelineTrace]) -> StageMetrics:
    return stage_report(
        traces,
        rt.question_map,
        judge_gw=rt.judge_gateway,
        wif_params=rt.config.wif,
        index=rt.index,
        derive_roles=rt.config.derive_roles,
        prompts_dir=str(rt.config.prompts_dir) if rt.config.prompts_dir else None,
    )


def trace_filename(question_id: str) -> str:
    return _SAFE_RE.sub("_", question_id) + ".json"


def _dump(path: Path, data) -> None:
    path.write_text(json.dumps(data, indent=2, sort_keys=True, ensure_ascii=False) + "\n", encoding="utf-8")


def write_run(
    out_dir: Path,
    rt: Runtime,
    traces: Sequence[PipelineTrace],
    report: StageMetrics,
    switches: Sequence[Switch] = (),
) -> None:
    """Traces go to ``traces/``; timings and the timestamp live only in the manifest."""
    trace_dir = out_dir / "traces"
    trace_dir.mkdir(parents=True, exist_ok=True)
    names = set()
    for t in traces:
        name = trace_filename(t.question_id)
        if name in names:
            raise InputError(f"question ids collide on trace filename {name}")
        names.add(name)
        (trace_dir / name).write_text(t.to_json(), encoding="utf-8")
    manifest = {
        "config_fingerprint": rt.config.fingerprint(switches),
        "config_path": str(rt.config.source) if rt.config.source else None,
        "dataset": str(rt.config.dataset),
        "seed": rt.config.seed,
        "ablation": [sw.name for sw in switches],
        "counts": {"questions": len(traces), "failed": sum(t.failed for t in traces)},
        "stage_timings": {t.question_id: t.stage_timings for t in traces},
        "created": time.strftime("%Y-%m-%dT%H:%M:%S%z"),
    }
    _dump(out_dir / "manifest.json", manifest)
    _dump(out_dir / "report.json", report.to_dict())
    (out_dir / "report.txt").write_text(render_table([("run", report)]), encoding="utf-8")


def execute_run(rt: Runtime, out_dir: Path, switches: Sequence[Switch] = (), jobs: int = 1) -> StageMetrics:
    traces = run_questions(rt, switches, jobs)
    report = report_for(rt, traces)
    write_run(out_dir, rt, traces, report, switches)
    return report


def load_traces(trace_dir: Path) -> List[PipelineTrace]:
    if (trace_dir / "traces").is_dir():
        trace_dir = trace_dir / "traces"
    if not trace_dir.is_dir():
        raise InputError(f"trace directory not found: {trace_dir}")
    traces = []
    for path in sorted(trace_dir.glob("*.json")):
        try:
            traces.append(PipelineTrace.load(path))
        except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
            raise InputError(f"unreadable trace {path}: {exc}") from exc
    return traces


@dataclass
class EvalResult:
    report: StageMetrics
    missing: List[str] = field(default_factory=list)
    orphans: List[str] = field(default_factory=list)


def evaluate_traces(rt: Runtime, traces: Sequence[PipelineTrace]) -> EvalResult:
    """Recompute the stage report from persisted traces against ``rt``'s dataset."""
    qmap = rt.question_map
    by_id = {t.question_id: t for t in traces}
    orphans = sorted(set(by_id) - set(qmap))
    matched = [by_id[qid] for qid in sorted(set(by_id) & set(qmap))]
    if traces and not matched:
        raise InputError(f"no trace matches the dataset; unmatched trace ids: {', '.join(orphans)}")
    missing = sorted(set(qmap) - set(by_id))
    for qid in orphans:
        logger.warning("trace %s has no question in the dataset; ignored", qid)
    report = report_for(rt, matched)
    if missing:
        report.notes.append(f"{len(missing)} missing trace(s): {', '.join(missing)}")
    return EvalResult(report, missing, orphans)


@dataclass
class AblationRow:
    name: str
    switches: Tuple[Switch, ...]
    fingerprint: str
    report: StageMetrics
    delta: Optional[float] = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "switches": [sw.name for sw in self.switches],
            "fingerprint": self.fingerprint,
            "report": self.report.to_dict(),
            "delta_answer_accuracy": self.delta,
        }


def ablation_plan(protocol: str, switches: Sequence[Switch]) -> List[Tuple[str, Tuple[Switch, ...]]]:
    """Variant names and switch sets, baseline first."""
    plan: List[Tuple[str, Tuple[Switch, ...]]] = [("GroupRAG", ())]
    if protocol == "leave_one_out":
        plan += [(f"w/o {sw.name}", (sw,)) for sw in switches]
    elif protocol == "progressive":
        for i, sw in enumerate(switches):
            plan.append((f"-{sw.name}", tuple(switches[: i + 1])))
    else:
        raise ConfigError("ablation needs protocol leave_one_out or progressive")
    return plan


def _slug(name: str) -> str:
    return re.sub(r"[^a-z0-9]+", "-", name.lower()).strip("-") or "baseline"


def run_ablation(rt: Runtime, out_dir: Path, jobs: int = 1) -> List[AblationRow]:
    spec = rt.config.ablation
    plan = ablation_plan(spec.protocol, spec.ordered())
    rows: List[AblationRow] = []
    for pos, (name, switches) in enumerate(plan):
        report = execute_run(rt, out_dir / "variants" / f"{pos:02d}-{_slug(name)}", switches, jobs)
        rows.append(AblationRow(name, switches, rt.config.fingerprint(switches), report))
    if spec.protocol == "progressive":
        for prev, row in zip(rows, rows[1:]):
            if prev.report.answer_accuracy is not None and row.report.answer_accuracy is not None:
                row.delta = row.report.answer_accuracy - prev.report.answer_accuracy
    comparison = {"protocol": spec.protocol, "rows": [r.to_dict() for r in rows]}
    _dump(out_dir / "comparison.json", comparison)
    deltas = [r.delta for r in rows] if spec.protocol == "progressive" else None
    table = render_table([(r.name, r.report) for r in rows], deltas)
    (out_dir / "comparison.txt").write_text(table, encoding="utf-8")
    return rows


def locality_violations(rows: Sequence[AblationRow]) -> List[str]:
    """Leave-one-out rows whose upstream metrics differ from the baseline row."""
    base = rows[0].report
    problems = []
    for row in rows[1:]:
        if len(row.switches) != 1:
            continue
        for metric in upstream_metrics(row.switches[0]):
            if row.report.column(metric) != base.column(metric):
                problems.append(f"{row.name}: {metric} {row.report.column(metric)} != {base.column(metric)}")
    return problems
