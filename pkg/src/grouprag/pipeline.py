"""The five GroupRAG stages and the per-question orchestration.

Stages run in order: keypoint extraction, knowledge-driven grouping, local
reasoning per group, global reasoning (selection + synthesis), and answer
alignment. Every LLM call goes through a :class:`~grouprag.gateway.Gateway`;
retrieval happens at keypoint, group and option granularity.
"""

from __future__ import annotations

import hashlib
import logging
import math
import time
from collections import Counter
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, FrozenSet, Iterable, List, NamedTuple, Optional, Sequence, Set, Tuple

import numpy as np

from . import prompts
from .errors import BackendError, InputError, ScriptError, StageError
from .gateway import STAGE_TEMPERATURE, CompletionRequest, Gateway
from .parsing import find_json, scan_option_letter
from .policy import PolicyParams, log_prob, sample_rollouts, selection_probs, threshold_select
from .records import (
    STAGES,
    AlignedAnswer,
    GlobalChain,
    Keypoint,
    KeypointGroup,
    LocalConclusion,
    PipelineTrace,
    Question,
    SelectionRecord,
)
from .retrieval import Index, RankedHits, retrieval_overlap, retrieve, tokenize

logger = logging.getLogger(__name__)

FEATURE_DIM = 8
SELECTORS = ("policy", "llm", "all")
GROUPING_MODES = ("llm", "deterministic")
REPROMPT_NOTE = "\n\nYour previous reply could not be parsed. Reply again, following the requested format exactly."

STOPWORDS = frozenset(
    """a an and are as at be been being but by can could did do does for from had has have he her his
    how i if in into is it its may might more most no not of on or our she should so such than that the
    their them then there these they this those to was we were what when which while who whom why will
    with would you your therefore thus because also both either""".split()
)


class Switch(NamedTuple):
    """One ablation switch: replace a stage's trained backend, or drop its retrieval."""

    stage: str
    kind: str  # "train" or "rag"

    @property
    def name(self) -> str:
        return f"{SWITCH_LABELS[self.stage]} {'Train' if self.kind == 'train' else 'RAG'}"

    @classmethod
    def parse(cls, text: str) -> "Switch":
        """Accepts ``"group.rag"``, ``"group:train"`` or display names like ``"Gro. RAG"`` (any case)."""
        key = "".join(text.split()).lower()
        for sw in ALL_SWITCHES:
            if key in ("".join(sw.name.split()).lower(), f"{sw.stage}.{sw.kind}", f"{sw.stage}:{sw.kind}"):
                return sw
        raise InputError(f"unknown ablation switch {text!r}")


SWITCH_LABELS = {"extract": "Ext.", "group": "Gro.", "local": "Loc.", "global": "Glo.", "align": "Ans."}
# pipeline order; only grouping, local reasoning and answer alignment retrieve
ALL_SWITCHES = (
    Switch("extract", "train"),
    Switch("group", "train"),
    Switch("group", "rag"),
    Switch("local", "train"),
    Switch("local", "rag"),
    Switch("global", "train"),
    Switch("align", "train"),
    Switch("align", "rag"),
)


@dataclass
class PipelineDeps:
    index: Index
    gateway: Gateway
    base_gateway: Optional[Gateway] = None
    selector: str = "policy"
    policy: Optional[PolicyParams] = None
    grouping_mode: str = "deterministic"
    tau: float = 0.4
    keypoint_k: int = 5
    group_k: int = 8
    option_k: int = 3
    rollouts: int = 8
    seed: int = 0
    config_fingerprint: str = ""
    prompts_dir: Optional[str] = None

    def __post_init__(self) -> None:
        if self.selector not in SELECTORS:
            raise InputError(f"selector must be one of {SELECTORS}, got {self.selector!r}")
        if self.grouping_mode not in GROUPING_MODES:
            raise InputError(f"grouping mode must be one of {GROUPING_MODES}, got {self.grouping_mode!r}")


@dataclass
class Caller:
    """Renders a stage template, sends it, and keeps a log of prompt/response pairs."""

    gateway: Gateway
    seed: int = 0
    prompts_dir: Optional[str] = None
    calls: List[dict] = field(default_factory=list)

    def ask(self, stage_tag: str, template: str, reprompt: bool = False, **values: str) -> str:
        system, user = prompts.render(template, self.prompts_dir, **values)
        if reprompt:
            user += REPROMPT_NOTE
        request = CompletionRequest(
            stage_tag=stage_tag,
            system_prompt=system,
            user_prompt=user,
            temperature=STAGE_TEMPERATURE[stage_tag],
            seed=self.seed,
        )
        result = self.gateway.complete(request)
        self.calls.append({"stage": stage_tag, "user_prompt": user, "response": result.text})
        return result.text

    def child(self) -> "Caller":
        return Caller(self.gateway, self.seed, self.prompts_dir)


def _as_caller(gw, seed: int = 0, prompts_dir: Optional[str] = None) -> Caller:
    return gw if isinstance(gw, Caller) else Caller(gw, seed, prompts_dir)


def _empty_hits(query: str, k: int) -> RankedHits:
    return RankedHits(query=query, k=k, entries=())


def _safe_retrieve(index: Index, query: str, k: int) -> RankedHits:
    try:
        return retrieve(index, query, k)
    except InputError:
        # a keypoint like "???" has no searchable tokens; it just gets no evidence
        return _empty_hits(query, k)


def _format_evidence(index: Index, hits: RankedHits) -> str:
    if not hits.entries:
        return "(none)"
    return "\n".join(f"[{cid}] {index.chunk(cid).text}" for cid in hits.ids)


# --- stage 1: keypoint extraction -------------------------------------------------


def _parse_keypoint_list(text: str) -> Optional[List[str]]:
    value = find_json(text, list)
    if value is None or not all(isinstance(v, str) for v in value):
        return None
    return value


def extract_keypoints(q: Question, gw, seed: int = 0, prompts_dir: Optional[str] = None) -> List[Keypoint]:
    if not q.stem.strip():
        raise InputError(f"question {q.id}: empty stem")
    caller = _as_caller(gw, seed, prompts_dir)
    items = None
    for attempt in range(2):
        items = _parse_keypoint_list(caller.ask("extract", "extract", reprompt=attempt > 0, question=q.stem))
        if items is not None:
            break
    if items is None:
        raise StageError("extract", "reply is not a JSON array of strings")
    seen: Set[str] = set()
    keypoints: List[Keypoint] = []
    lowered_stem = q.stem.lower()
    for raw in items:
        text = raw.strip()
        key = text.casefold()
        if not text or key in seen:
            continue
        seen.add(key)
        pos = lowered_stem.find(text.lower())
        span = (pos, pos + len(text)) if pos >= 0 else None
        keypoints.append(Keypoint(len(keypoints), text, span))
    if not keypoints:
        raise StageError("extract", "no keypoints extracted")
    return keypoints


# --- stage 2: knowledge-driven grouping -------------------------------------------


@dataclass
class GroupingOutcome:
    groups: List[KeypointGroup]
    keypoint_hits: List[RankedHits]
    mode: str
    fallback: bool = False
    fallback_reason: Optional[str] = None


def _components(n: int, edges: Iterable[Tuple[int, int]]) -> List[List[int]]:
    parent = list(range(n))

    def find(i: int) -> int:
        while parent[i] != i:
            parent[i] = parent[parent[i]]
            i = parent[i]
        return i

    for i, j in edges:
        ri, rj = find(i), find(j)
        if ri != rj:
            parent[max(ri, rj)] = min(ri, rj)
    comps: Dict[int, List[int]] = {}
    for i in range(n):
        comps.setdefault(find(i), []).append(i)
    return sorted(comps.values(), key=lambda c: c[0])


def overlap_partition(hits: Sequence[RankedHits], tau: float = 0.4) -> List[List[int]]:
    """Connected components of the graph linking keypoints whose hit overlap >= tau."""
    n = len(hits)
    edges = [(i, j) for i in range(n) for j in range(i + 1, n) if retrieval_overlap(hits[i], hits[j]) >= tau]
    return _components(n, edges)


def group_label(members: Sequence[int], hits: Sequence[RankedHits], keypoints: Sequence[Keypoint], index: Index) -> str:
    """Source document of the best-scoring chunk the members share.

    Falls back to the best chunk of any member, then to the first keypoint's text
    when the group retrieved nothing.
    """
    total: Dict[str, float] = {}
    count: Counter = Counter()
    for i in members:
        for cid, score in hits[i].entries:
            total[cid] = total.get(cid, 0.0) + score
            count[cid] += 1
    shared = [cid for cid in total if count[cid] >= 2]
    pool = shared or list(total)
    if not pool:
        return keypoints[members[0]].text
    best = min(pool, key=lambda cid: (-total[cid], cid))
    return index.chunk(best).doc_id


def parse_partition(text: str, n: int) -> List[Tuple[List[int], Optional[str]]]:
    """Validate an LLM grouping reply; raises ValueError unless it partitions range(n)."""
    value = find_json(text, dict)
    if value is not None and "groups" in value:
        raw_groups = value["groups"]
    else:
        raw_groups = find_json(text, list)
    if not isinstance(raw_groups, list) or not raw_groups:
        raise ValueError("no list of groups found")
    out = []
    seen: Set[int] = set()
    for g in raw_groups:
        label = None
        if isinstance(g, dict):
            label = g.get("label")
            members = g.get("keypoints")
            if label is not None and (not isinstance(label, str) or not label.strip()):
                raise ValueError(f"bad label {label!r}")
        else:
            members = g
        if not isinstance(members, list) or not members:
            raise ValueError(f"group is not a non-empty list: {members!r}")
        for m in members:
            if isinstance(m, bool) or not isinstance(m, int) or not 0 <= m < n:
                raise ValueError(f"invalid keypoint index {m!r}")
            if m in seen:
                raise ValueError(f"keypoint {m} appears in two groups")
            seen.add(m)
        out.append((sorted(members), label.strip() if label else None))
    if seen != set(range(n)):
        raise ValueError(f"keypoints {sorted(set(range(n)) - seen)} not assigned")
    return out


def group_keypoints(
    kps: Sequence[Keypoint],
    index: Index,
    gw=None,
    mode: str = "deterministic",
    question: Optional[Question] = None,
    tau: float = 0.4,
    keypoint_k: int = 5,
    group_k: int = 8,
    keypoint_rag: bool = True,
    group_rag: bool = True,
) -> GroupingOutcome:
    """Partition keypoints into knowledge groups and attach group-level evidence.

    ``keypoint_rag`` controls the per-keypoint retrieval that drives grouping;
    ``group_rag`` controls the group-level evidence used later by local reasoning.
    """
    if not kps:
        raise InputError("grouping needs at least one keypoint")
    if mode not in GROUPING_MODES:
        raise InputError(f"unknown grouping mode {mode!r}")
    hits = [
        _safe_retrieve(index, kp.text, keypoint_k) if keypoint_rag else _empty_hits(kp.text, keypoint_k)
        for kp in kps
    ]

    fallback, reason = False, None
    parts: List[Tuple[List[int], Optional[str]]] = []
    if mode == "llm":
        if gw is None:
            raise InputError("llm grouping needs a gateway")
        caller = _as_caller(gw)
        listing = "\n".join(f"{kp.index}: {kp.text}" for kp in kps)
        evidence = "\n\n".join(
            f"Keypoint {kp.index}:\n{_format_evidence(index, h)}" for kp, h in zip(kps, hits)
        )
        for attempt in range(2):
            reply = caller.ask(
                "group",
                "group",
                reprompt=attempt > 0,
                question=question.stem if question else "",
                keypoints=listing,
                evidence=evidence,
            )
            try:
                parts = parse_partition(reply, len(kps))
                break
            except ValueError as exc:
                reason = str(exc)
        else:
            fallback = True
            logger.warning("llm grouping unusable (%s); using overlap grouping", reason)
    if mode == "deterministic" or fallback:
        parts = [(members, None) for members in overlap_partition(hits, tau)]

    parts.sort(key=lambda p: p[0][0])
    groups = []
    for gid, (members, label) in enumerate(parts):
        query = " ".join(kps[i].text for i in members)
        evidence_hits = _safe_retrieve(index, query, group_k) if group_rag else _empty_hits(query, group_k)
        groups.append(
            KeypointGroup(
                group_id=gid,
                keypoint_indices=frozenset(members),
                label=label or group_label(members, hits, kps, index),
                evidence=evidence_hits,
            )
        )
    return GroupingOutcome(groups, hits, mode, fallback, reason if fallback else None)


# --- stage 3: local reasoning ------------------------------------------------------


def local_reason(
    g: KeypointGroup,
    q: Question,
    keypoints: Sequence[Keypoint],
    index: Index,
    gw,
    seed: int = 0,
    prompts_dir: Optional[str] = None,
) -> LocalConclusion:
    caller = _as_caller(gw, seed, prompts_dir)
    group_text = "\n".join(f"- {keypoints[i].text}" for i in sorted(g.keypoint_indices))
    evidence = _format_evidence(index, g.evidence)
    allowed = set(g.evidence.ids)
    reply = ""
    for attempt in range(2):
        reply = caller.ask(
            "local", "local", reprompt=attempt > 0, question=q.stem, group=group_text, evidence=evidence
        )
        payload = find_json(reply, dict)
        if payload is None or not isinstance(payload.get("conclusion"), str) or not payload["conclusion"].strip():
            continue
        cited_raw = payload.get("cited", [])
        if not isinstance(cited_raw, list):
            cited_raw = []
        cited, dropped = [], 0
        for cid in cited_raw:
            if isinstance(cid, str) and cid in allowed and cid not in cited:
                cited.append(cid)
            else:
                dropped += 1
        if dropped:
            logger.warning("group %d: dropped %d citation(s) outside the evidence", g.group_id, dropped)
        return LocalConclusion(g.group_id, payload["conclusion"].strip(), cited, dropped_citations=dropped)
    return LocalConclusion(g.group_id, reply.strip() or "(no conclusion)", [], degraded=True)


# --- stage 4: global reasoning ------------------------------------------------------


def _token_set(text: str) -> Set[str]:
    return set(tokenize(text))


def conclusion_features(
    groups: Sequence[KeypointGroup], conclusions: Sequence[LocalConclusion], stem: str
) -> np.ndarray:
    """Per-conclusion feature matrix (n, 8) for the selection policy.

    Columns: group size, mean and max evidence score, log(1 + conclusion
    tokens), fraction of conclusion tokens found in the stem, fraction found in
    any other conclusion, citation count, degraded flag.
    """
    by_id = {g.group_id: g for g in groups}
    stem_tokens = _token_set(stem)
    token_sets = [_token_set(c.text) for c in conclusions]
    rows = []
    for pos, c in enumerate(conclusions):
        g = by_id[c.group_id]
        scores = [s for _, s in g.evidence.entries]
        toks = token_sets[pos]
        others: Set[str] = set().union(*(t for j, t in enumerate(token_sets) if j != pos))
        rows.append(
            [
                float(len(g.keypoint_indices)),
                float(np.mean(scores)) if scores else 0.0,
                float(max(scores)) if scores else 0.0,
                math.log1p(len(tokenize(c.text))),
                len(toks & stem_tokens) / len(toks) if toks else 0.0,
                len(toks & others) / len(toks) if toks else 0.0,
                float(len(c.cited_chunk_ids)),
                1.0 if c.degraded else 0.0,
            ]
        )
    return np.array(rows, dtype=np.float64).reshape(len(conclusions), FEATURE_DIM)


@dataclass
class SelectionContext:
    question: Optional[Question] = None
    features: Optional[np.ndarray] = None
    policy: Optional[PolicyParams] = None
    gateway: object = None
    rollouts: int = 0
    rollout_seed: Optional[int] = None


def _parse_id_list(text: str, valid: Set[int]) -> Optional[List[int]]:
    value = find_json(text, list)
    if value is None:
        return None
    return [v for v in value if isinstance(v, int) and not isinstance(v, bool) and v in valid]


def select_conclusions(
    cs: Sequence[LocalConclusion], selector: str = "policy", ctx: Optional[SelectionContext] = None
) -> SelectionRecord:
    """Pick the conclusions that feed the global chain. Never returns an empty selection.

    ``policy`` thresholds the logistic head's probabilities at 0.5, ``llm``
    asks the select model for an id list, ``all`` keeps everything. When a mode
    would select nothing, the most probable conclusion is kept instead.
    """
    if not cs:
        raise InputError("selection needs at least one conclusion")
    if selector not in SELECTORS:
        raise InputError(f"unknown selector {selector!r}")
    ctx = ctx or SelectionContext()
    ids = [c.group_id for c in cs]
    features = ctx.features
    if features is None:
        features = np.zeros((len(cs), FEATURE_DIM))
    policy = ctx.policy if ctx.policy is not None else PolicyParams.zeros(features.shape[1])
    probs = selection_probs(policy, features)
    record = SelectionRecord(selector=selector, selected=[], probs=probs.tolist(), features=features.tolist())

    if selector == "policy":
        chosen, rescued = threshold_select(probs)
        record.selected = sorted(ids[i] for i in chosen)
        record.rescued = rescued
        if ctx.rollouts > 0:
            for sel in sample_rollouts(probs, ctx.rollouts, ctx.rollout_seed):
                record.rollouts.append(
                    {"selected": [ids[i] for i in np.flatnonzero(sel)], "log_prob": log_prob(probs, sel)}
                )
        return record

    if selector == "all":
        record.selected = sorted(ids)
        return record

    caller = _as_caller(ctx.gateway)
    listing = "\n".join(f"{c.group_id}: {c.text}" for c in cs)
    picked = None
    for attempt in range(2):
        reply = caller.ask(
            "select",
            "select",
            reprompt=attempt > 0,
            question=ctx.question.stem if ctx.question else "",
            conclusions=listing,
        )
        picked = _parse_id_list(reply, set(ids))
        if picked is not None:
            break
    if picked:
        record.selected = sorted(set(picked))
    else:
        record.selected = [ids[int(np.argmax(probs))]]
        record.rescued = True
    return record


def synthesize_global(
    selected: Sequence[LocalConclusion], q: Question, gw, seed: int = 0, prompts_dir: Optional[str] = None
) -> GlobalChain:
    if not selected:
        raise InputError("synthesis needs at least one selected conclusion")
    caller = _as_caller(gw, seed, prompts_dir)
    listing = "\n".join(f"- {c.text}" for c in selected)
    for attempt in range(2):
        text = caller.ask("synthesize", "synthesize", reprompt=attempt > 0, question=q.stem, conclusions=listing)
        if text.strip():
            return GlobalChain(sorted(c.group_id for c in selected), text.strip())
    raise StageError("global", "synthesis returned an empty chain")


# --- stage 5: answer alignment ------------------------------------------------------


def top_terms(text: str, n: int = 8) -> List[str]:
    """The ``n`` most frequent non-stopword tokens, ties broken by first occurrence."""
    tokens = [t for t in tokenize(text) if t not in STOPWORDS]
    counts = Counter(tokens)
    first = {}
    for pos, t in enumerate(tokens):
        first.setdefault(t, pos)
    return sorted(counts, key=lambda t: (-counts[t], first[t]))[:n]


def _normalize_letter(value) -> Optional[str]:
    if not isinstance(value, str):
        return None
    return value.strip().strip("().:").strip().upper() or None


def align_answer(
    chain: GlobalChain,
    q: Question,
    index: Index,
    gw,
    option_rag: bool = True,
    k: int = 3,
    seed: int = 0,
    prompts_dir: Optional[str] = None,
) -> AlignedAnswer:
    caller = _as_caller(gw, seed, prompts_dir)
    terms = " ".join(top_terms(chain.chain_text))
    evidence: Dict[str, RankedHits] = {}
    blocks = []
    for letter, text in q.options.items():
        query = f"{text} {terms}".strip()
        hits = _safe_retrieve(index, query, k) if option_rag else _empty_hits(query, k)
        evidence[letter] = hits
        blocks.append(f"{letter}. {text}\n{_format_evidence(index, hits)}")
    options_block = "\n\n".join(blocks)

    for attempt in range(2):
        reply = caller.ask(
            "align", "align", reprompt=attempt > 0, question=q.stem, chain=chain.chain_text, options=options_block
        )
        payload = find_json(reply, dict)
        if payload is not None:
            letter = _normalize_letter(payload.get("choice"))
            if letter in q.options:
                analysis = payload.get("analysis")
                analysis = {str(k): str(v) for k, v in analysis.items()} if isinstance(analysis, dict) else {}
                rationale = payload.get("rationale")
                return AlignedAnswer(
                    letter, analysis, rationale if isinstance(rationale, str) else "", evidence, "json"
                )
        letter = scan_option_letter(reply, q.options)
        if letter is not None:
            return AlignedAnswer(letter, {}, reply.strip(), evidence, "regex")
    raise StageError("align", "no valid option letter in the reply")


# --- orchestration ----------------------------------------------------------------


def question_seed(seed: int, question_id: str) -> int:
    digest = hashlib.sha256(f"{seed}:{question_id}".encode("utf-8")).digest()
    return int.from_bytes(digest[:8], "big")


def run_pipeline(q: Question, deps: PipelineDeps, ablation: Iterable[Switch] = ()) -> PipelineTrace:
    """Run all five stages for one question and return the full trace.

    A stage failure stops the run; the trace keeps every upstream output and
    names the failing stage in ``failed_at``.
    """
    ablation = frozenset(ablation)
    trace = PipelineTrace(
        question_id=q.id,
        seed=deps.seed,
        config_fingerprint=deps.config_fingerprint,
        ablation=[sw.name for sw in ALL_SWITCHES if sw in ablation],
    )
    base = deps.base_gateway or deps.gateway

    def caller_for(stage: str) -> Caller:
        gw = base if Switch(stage, "train") in ablation else deps.gateway
        return Caller(gw, deps.seed, deps.prompts_dir)

    def rag(stage: str) -> bool:
        return Switch(stage, "rag") not in ablation

    roles = q.annotations.roles
    stage = STAGES[0]
    try:
        stage = "extract"
        t0 = time.perf_counter()
        caller = caller_for("extract")
        try:
            trace.keypoints = extract_keypoints(q, caller)
        finally:
            trace.llm_calls.extend(caller.calls)
        trace.stage_timings["extract"] = time.perf_counter() - t0

        stage = "group"
        t0 = time.perf_counter()
        caller = caller_for("group")
        try:
            outcome = group_keypoints(
                trace.keypoints,
                deps.index,
                caller,
                mode=deps.grouping_mode,
                question=q,
                tau=deps.tau,
                keypoint_k=deps.keypoint_k,
                group_k=deps.group_k,
                keypoint_rag=rag("group"),
                group_rag=rag("local"),
            )
        finally:
            trace.llm_calls.extend(caller.calls)
        trace.groups = outcome.groups
        trace.keypoint_hits = outcome.keypoint_hits
        trace.grouping_mode = outcome.mode
        trace.grouping_fallback = outcome.fallback
        if outcome.fallback:
            trace.warnings.append(f"grouping fell back to overlap mode: {outcome.fallback_reason}")
        trace.stage_timings["group"] = time.perf_counter() - t0

        stage = "local"
        t0 = time.perf_counter()
        caller = caller_for("local")
        children = [caller.child() for _ in trace.groups]

        def work(pair):
            g, child = pair
            return local_reason(g, q, trace.keypoints, deps.index, child)

        try:
            if len(trace.groups) > 1 and caller.gateway.max_in_flight > 1:
                with ThreadPoolExecutor(max_workers=caller.gateway.max_in_flight) as pool:
                    conclusions = list(pool.map(work, zip(trace.groups, children)))
            else:
                conclusions = [work(pair) for pair in zip(trace.groups, children)]
        finally:
            for child in children:
                trace.llm_calls.extend(child.calls)
        for c in conclusions:
            if roles is not None:
                c.role_label = roles.role_of(c.group_id)
            if c.degraded:
                trace.warnings.append(f"local conclusion {c.group_id} degraded (unparseable reply)")
            if c.dropped_citations:
                trace.warnings.append(f"local conclusion {c.group_id}: dropped {c.dropped_citations} citation(s)")
        trace.conclusions = conclusions
        trace.stage_timings["local"] = time.perf_counter() - t0

        stage = "global"
        t0 = time.perf_counter()
        caller = caller_for("global")
        trained_glo = Switch("global", "train") not in ablation
        ctx = SelectionContext(
            question=q,
            features=conclusion_features(trace.groups, conclusions, q.stem),
            policy=deps.policy if trained_glo else None,
            gateway=caller,
            rollouts=deps.rollouts,
            rollout_seed=question_seed(deps.seed, q.id),
        )
        try:
            trace.selection = select_conclusions(conclusions, deps.selector, ctx)
            chosen = set(trace.selection.selected)
            trace.global_chain = synthesize_global([c for c in conclusions if c.group_id in chosen], q, caller)
        finally:
            trace.llm_calls.extend(caller.calls)
        trace.stage_timings["global"] = time.perf_counter() - t0

        stage = "align"
        t0 = time.perf_counter()
        caller = caller_for("align")
        try:
            trace.aligned_answer = align_answer(
                trace.global_chain, q, deps.index, caller, option_rag=rag("align"), k=deps.option_k
            )
        finally:
            trace.llm_calls.extend(caller.calls)
        trace.stage_timings["align"] = time.perf_counter() - t0
    except (StageError, BackendError, ScriptError, InputError) as exc:
        trace.failed_at = stage
        trace.error = f"{type(exc).__name__}: {exc}"
        logger.warning("question %s failed at %s: %s", q.id, stage, exc)
    return trace
