"""Data records passed between pipeline stages and persisted in traces."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Tuple, Union

from .errors import InputError
from .policy import RoleLabels
from .retrieval import RankedHits

# pipeline stage keys, in execution order
STAGES = ("extract", "group", "local", "global", "align")
ROLES = ("Core", "Support", "Noise")


@dataclass
class GoldAnnotations:
    keypoints: Optional[List[str]] = None
    # groups of indices into ``keypoints``
    grouping: Optional[List[List[int]]] = None
    roles: Optional[RoleLabels] = None

    def to_dict(self) -> dict:
        out: dict = {}
        if self.keypoints is not None:
            out["keypoints"] = list(self.keypoints)
        if self.grouping is not None:
            out["grouping"] = [list(g) for g in self.grouping]
        if self.roles is not None:
            out["roles"] = self.roles.to_dict()
        return out

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "GoldAnnotations":
        data = data or {}
        kps = data.get("keypoints")
        grouping = data.get("grouping")
        roles = data.get("roles")
        ann = cls(
            keypoints=[str(k) for k in kps] if kps is not None else None,
            grouping=[[int(i) for i in g] for g in grouping] if grouping is not None else None,
            roles=RoleLabels.from_dict(roles) if roles is not None else None,
        )
        if ann.grouping is not None:
            if ann.keypoints is None:
                raise InputError("grouping annotation needs gold keypoints")
            flat = sorted(i for g in ann.grouping for i in g)
            if flat != list(range(len(ann.keypoints))):
                raise InputError("gold grouping must partition the gold keypoint indices")
        return ann


@dataclass
class Question:
    id: str
    stem: str
    options: Dict[str, str]
    gold_option: Optional[str] = None
    annotations: GoldAnnotations = field(default_factory=GoldAnnotations)

    def __post_init__(self) -> None:
        if len(self.options) < 2:
            raise InputError(f"question {self.id}: needs at least 2 options")
        if self.gold_option is not None and self.gold_option not in self.options:
            raise InputError(f"question {self.id}: gold option {self.gold_option!r} is not an option")

    def to_dict(self) -> dict:
        out = {"id": self.id, "stem": self.stem, "options": dict(self.options)}
        if self.gold_option is not None:
            out["gold"] = self.gold_option
        ann = self.annotations.to_dict()
        if ann:
            out["annotations"] = ann
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "Question":
        try:
            options = {str(k): str(v) for k, v in data["options"].items()}
            return cls(
                id=str(data["id"]),
                stem=str(data["stem"]),
                options=options,
                gold_option=data.get("gold"),
                annotations=GoldAnnotations.from_dict(data.get("annotations")),
            )
        except KeyError as exc:
            raise InputError(f"question record missing field {exc}") from exc
        except (AttributeError, TypeError, ValueError) as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"malformed question record: {exc}") from exc


def load_dataset(path: Union[str, Path]) -> List[Question]:
    """Read a question JSONL file. Errors name the offending 1-based line."""
    questions: List[Question] = []
    seen: Dict[str, int] = {}
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise InputError(f"cannot open dataset {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                q = Question.from_dict(json.loads(line))
            except (json.JSONDecodeError, InputError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
            if q.id in seen:
                raise InputError(f"{path}:{lineno}: duplicate question id {q.id!r} (first on line {seen[q.id]})")
            seen[q.id] = lineno
            questions.append(q)
    return questions


@dataclass
class Keypoint:
    index: int
    text: str
    source_span: Optional[Tuple[int, int]] = None

    def to_dict(self) -> dict:
        return {
            "index": self.index,
            "text": self.text,
            "source_span": list(self.source_span) if self.source_span else None,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "Keypoint":
        span = data.get("source_span")
        return cls(int(data["index"]), data["text"], tuple(span) if span else None)


@dataclass
class KeypointGroup:
    group_id: int
    keypoint_indices: frozenset
    label: str
    evidence: RankedHits

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "keypoint_indices": sorted(self.keypoint_indices),
            "label": self.label,
            "evidence": self.evidence.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "KeypointGroup":
        return cls(
            int(data["group_id"]),
            frozenset(data["keypoint_indices"]),
            data["label"],
            RankedHits.from_dict(data["evidence"]),
        )


@dataclass
class LocalConclusion:
    group_id: int
    text: str
    cited_chunk_ids: List[str] = field(default_factory=list)
    role_label: Optional[str] = None
    degraded: bool = False
    dropped_citations: int = 0

    def to_dict(self) -> dict:
        return {
            "group_id": self.group_id,
            "text": self.text,
            "cited_chunk_ids": list(self.cited_chunk_ids),
            "role_label": self.role_label,
            "degraded": self.degraded,
            "dropped_citations": self.dropped_citations,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "LocalConclusion":
        return cls(
            int(data["group_id"]),
            data["text"],
            list(data.get("cited_chunk_ids", [])),
            data.get("role_label"),
            bool(data.get("degraded", False)),
            int(data.get("dropped_citations", 0)),
        )


@dataclass
class SelectionRecord:
    selector: str
    selected: List[int]
    probs: List[float] = field(default_factory=list)
    features: List[List[float]] = field(default_factory=list)
    rescued: bool = False
    # sampled only for diagnostics; the decision above is deterministic
    rollouts: List[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "selector": self.selector,
            "selected": list(self.selected),
            "probs": list(self.probs),
            "features": [list(f) for f in self.features],
            "rescued": self.rescued,
            "rollouts": list(self.rollouts),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SelectionRecord":
        return cls(
            data["selector"],
            [int(i) for i in data["selected"]],
            [float(p) for p in data.get("probs", [])],
            [[float(x) for x in f] for f in data.get("features", [])],
            bool(data.get("rescued", False)),
            list(data.get("rollouts", [])),
        )


@dataclass
class GlobalChain:
    selected_conclusion_ids: List[int]
    chain_text: str

    def to_dict(self) -> dict:
        return {"selected_conclusion_ids": sorted(self.selected_conclusion_ids), "chain_text": self.chain_text}

    @classmethod
    def from_dict(cls, data: dict) -> "GlobalChain":
        return cls([int(i) for i in data["selected_conclusion_ids"]], data["chain_text"])


@dataclass
class AlignedAnswer:
    chosen_option: str
    per_option_analysis: Dict[str, str] = field(default_factory=dict)
    rationale: str = ""
    option_evidence: Dict[str, RankedHits] = field(default_factory=dict)
    parsed_via: str = "json"

    def to_dict(self) -> dict:
        return {
            "chosen_option": self.chosen_option,
            "per_option_analysis": dict(self.per_option_analysis),
            "rationale": self.rationale,
            "option_evidence": {k: v.to_dict() for k, v in self.option_evidence.items()},
            "parsed_via": self.parsed_via,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "AlignedAnswer":
        return cls(
            data["chosen_option"],
            dict(data.get("per_option_analysis", {})),
            data.get("rationale", ""),
            {k: RankedHits.from_dict(v) for k, v in data.get("option_evidence", {}).items()},
            data.get("parsed_via", "json"),
        )


def _opt(value, fn):
    return None if value is None else fn(value)


@dataclass
class PipelineTrace:
    question_id: str
    seed: int
    config_fingerprint: str = ""
    ablation: List[str] = field(default_factory=list)
    failed_at: Optional[str] = None
    error: Optional[str] = None
    keypoints: Optional[List[Keypoint]] = None
    keypoint_hits: Optional[List[RankedHits]] = None
    groups: Optional[List[KeypointGroup]] = None
    grouping_mode: Optional[str] = None
    grouping_fallback: bool = False
    conclusions: Optional[List[LocalConclusion]] = None
    selection: Optional[SelectionRecord] = None
    global_chain: Optional[GlobalChain] = None
    aligned_answer: Optional[AlignedAnswer] = None
    llm_calls: List[dict] = field(default_factory=list)
    warnings: List[str] = field(default_factory=list)
    stage_timings: Dict[str, float] = field(default_factory=dict)

    @property
    def failed(self) -> bool:
        return self.failed_at is not None

    def to_dict(self, include_timings: bool = False) -> dict:
        out = {
            "question_id": self.question_id,
            "seed": self.seed,
            "config_fingerprint": self.config_fingerprint,
            "ablation": list(self.ablation),
            "failed": self.failed,
            "failed_at": self.failed_at,
            "error": self.error,
            "keypoints": _opt(self.keypoints, lambda v: [k.to_dict() for k in v]),
            "keypoint_hits": _opt(self.keypoint_hits, lambda v: [h.to_dict() for h in v]),
            "groups": _opt(self.groups, lambda v: [g.to_dict() for g in v]),
            "grouping_mode": self.grouping_mode,
            "grouping_fallback": self.grouping_fallback,
            "conclusions": _opt(self.conclusions, lambda v: [c.to_dict() for c in v]),
            "selection": _opt(self.selection, SelectionRecord.to_dict),
            "global_chain": _opt(self.global_chain, GlobalChain.to_dict),
            "aligned_answer": _opt(self.aligned_answer, AlignedAnswer.to_dict),
            "llm_calls": list(self.llm_calls),
            "warnings": list(self.warnings),
        }
        if include_timings:
            out["stage_timings"] = dict(self.stage_timings)
        return out

    def to_json(self, include_timings: bool = False) -> str:
        return json.dumps(self.to_dict(include_timings), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    @classmethod
    def from_dict(cls, data: dict) -> "PipelineTrace":
        return cls(
            question_id=data["question_id"],
            seed=int(data["seed"]),
            config_fingerprint=data.get("config_fingerprint", ""),
            ablation=list(data.get("ablation", [])),
            failed_at=data.get("failed_at"),
            error=data.get("error"),
            keypoints=_opt(data.get("keypoints"), lambda v: [Keypoint.from_dict(k) for k in v]),
            keypoint_hits=_opt(data.get("keypoint_hits"), lambda v: [RankedHits.from_dict(h) for h in v]),
            groups=_opt(data.get("groups"), lambda v: [KeypointGroup.from_dict(g) for g in v]),
            grouping_mode=data.get("grouping_mode"),
            grouping_fallback=bool(data.get("grouping_fallback", False)),
            conclusions=_opt(data.get("conclusions"), lambda v: [LocalConclusion.from_dict(c) for c in v]),
            selection=_opt(data.get("selection"), SelectionRecord.from_dict),
            global_chain=_opt(data.get("global_chain"), GlobalChain.from_dict),
            aligned_answer=_opt(data.get("aligned_answer"), AlignedAnswer.from_dict),
            llm_calls=list(data.get("llm_calls", [])),
            warnings=list(data.get("warnings", [])),
            stage_timings=dict(data.get("stage_timings", {})),
        )

    @classmethod
    def load(cls, path: Union[str, Path]) -> "PipelineTrace":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def validate_trace(trace: PipelineTrace) -> List[str]:
    """List every dangling reference inside a trace (empty list means consistent)."""
    problems = []
    kp_ids = {k.index for k in trace.keypoints or []}
    if trace.keypoints is not None and sorted(kp_ids) != list(range(len(trace.keypoints))):
        problems.append("keypoint indices are not dense from 0")
    if trace.groups is not None:
        covered: List[int] = []
        for g in trace.groups:
            covered.extend(g.keypoint_indices)
            if not g.keypoint_indices <= kp_ids:
                problems.append(f"group {g.group_id} references unknown keypoints")
        if sorted(covered) != sorted(kp_ids):
            problems.append("groups do not partition the keypoints")
    group_ev = {g.group_id: set(g.evidence.ids) for g in trace.groups or []}
    for c in trace.conclusions or []:
        if c.group_id not in group_ev:
            problems.append(f"conclusion references unknown group {c.group_id}")
        elif not set(c.cited_chunk_ids) <= group_ev[c.group_id]:
            problems.append(f"conclusion {c.group_id} cites chunks outside its evidence")
    cids = {c.group_id for c in trace.conclusions or []}
    if trace.selection is not None and not set(trace.selection.selected) <= cids:
        problems.append("selection references unknown conclusions")
    if trace.global_chain is not None and not set(trace.global_chain.selected_conclusion_ids) <= cids:
        problems.append("global chain references unknown conclusions")
    return problems
