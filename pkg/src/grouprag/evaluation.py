"""Stage-wise metrics: extraction P/R/F1, BCubed grouping, judged local accuracy,
global WIF and final answer accuracy."""

from __future__ import annotations

import math
import re
from collections import Counter
from dataclasses import dataclass, field
from typing import Dict, Hashable, List, Mapping, NamedTuple, Optional, Sequence, Tuple

from . import prompts
from .errors import BackendError, InputError, ScriptError
from .gateway import CompletionRequest
from .policy import RoleLabels, WifParams, wif_score
from .records import LocalConclusion, PipelineTrace, Question
from .retrieval import Index, tokenize

MATCH_THRESHOLD = 0.6


@dataclass(frozen=True)
class PrfScores:
    precision: float
    recall: float
    f1: float

    @classmethod
    def from_pr(cls, precision: float, recall: float) -> "PrfScores":
        total = precision + recall
        return cls(precision, recall, 2 * precision * recall / total if total > 0 else 0.0)

    def to_dict(self) -> Dict[str, float]:
        return {"precision": self.precision, "recall": self.recall, "f1": self.f1}


def token_f1(a: str, b: str) -> float:
    ta, tb = tokenize(a), tokenize(b)
    if not ta and not tb:
        return 1.0
    common = sum((Counter(ta) & Counter(tb)).values())
    if common == 0:
        return 0.0
    p, r = common / len(ta), common / len(tb)
    return 2 * p * r / (p + r)


def match_keypoints(
    predicted: Sequence[str], gold: Sequence[str], threshold: float = MATCH_THRESHOLD
) -> List[Tuple[int, int]]:
    """Greedy one-to-one matching, best token-F1 pairs first.

    Ties are broken on the strings themselves so the number of matches does
    not depend on list order.
    """
    pairs = []
    for i, p in enumerate(predicted):
        for j, g in enumerate(gold):
            score = token_f1(p, g)
            if score >= threshold:
                pairs.append((-score, p, g, i, j))
    pairs.sort()
    used_p, used_g, matches = set(), set(), []
    for _, _, _, i, j in pairs:
        if i in used_p or j in used_g:
            continue
        used_p.add(i)
        used_g.add(j)
        matches.append((i, j))
    return matches


def extraction_prf(
    predicted: Sequence[str], gold: Sequence[str], threshold: float = MATCH_THRESHOLD
) -> PrfScores:
    if not predicted and not gold:
        return PrfScores(1.0, 1.0, 1.0)
    if not predicted or not gold:
        return PrfScores(0.0, 0.0, 0.0)
    matched = len(match_keypoints(predicted, gold, threshold))
    return PrfScores.from_pr(matched / len(predicted), matched / len(gold))


def bcubed(
    predicted: Mapping[Hashable, Hashable], gold: Mapping[Hashable, Hashable], f1_mode: str = "harmonic"
) -> PrfScores:
    """BCubed precision/recall of a predicted clustering against a gold one.

    Both partitions map item -> cluster id over the same items. With
    ``f1_mode="harmonic"`` F1 is the harmonic mean of the averaged P and R;
    ``"item_mean"`` averages per-item F1 instead.
    """
    if set(predicted) != set(gold):
        raise InputError("BCubed needs identical item universes")
    if not predicted:
        raise InputError("BCubed over an empty item set is undefined")
    pred_size = Counter(predicted.values())
    gold_size = Counter(gold.values())
    both = Counter((predicted[i], gold[i]) for i in predicted)
    precisions, recalls, item_f1 = [], [], []
    for item in predicted:
        shared = both[(predicted[item], gold[item])]
        p = shared / pred_size[predicted[item]]
        r = shared / gold_size[gold[item]]
        precisions.append(p)
        recalls.append(r)
        item_f1.append(2 * p * r / (p + r))
    n = len(precisions)
    precision, recall = math.fsum(precisions) / n, math.fsum(recalls) / n
    if f1_mode == "harmonic":
        return PrfScores.from_pr(precision, recall)
    if f1_mode == "item_mean":
        return PrfScores(precision, recall, math.fsum(item_f1) / n)
    raise InputError(f"unknown f1_mode {f1_mode!r}")


def partition_from_groups(groups: Sequence[Sequence[Hashable]]) -> Dict[Hashable, int]:
    return {item: cid for cid, members in enumerate(groups) for item in members}


class Verdict(NamedTuple):
    correct: bool
    flagged: bool


_FIRST_WORD_RE = re.compile(r"[A-Za-z]+")


def parse_verdict(text: str) -> Verdict:
    """CORRECT/INCORRECT from a judge reply; anything else is incorrect and flagged."""
    first = _FIRST_WORD_RE.search(text or "")
    if first and first.group(0).upper() in ("CORRECT", "INCORRECT"):
        return Verdict(first.group(0).upper() == "CORRECT", False)
    tokens = set(re.findall(r"\b(INCORRECT|CORRECT)\b", text or ""))
    if len(tokens) == 1:
        return Verdict(tokens.pop() == "CORRECT", False)
    return Verdict(False, True)


def _ask_judge(gw, template: str, prompts_dir: Optional[str] = None, **values: str) -> str:
    system, user = prompts.render(template, prompts_dir, **values)
    return gw.complete(CompletionRequest("judge", system, user)).text


def judge_local(
    conclusion: LocalConclusion,
    q: Question,
    gw,
    keypoints: Sequence[str] = (),
    evidence: str = "(none)",
    prompts_dir: Optional[str] = None,
) -> Verdict:
    """Ask the judge backend whether a local conclusion is correct.

    Backend failures propagate; callers decide whether to skip the item.
    """
    reply = _ask_judge(
        gw,
        "judge",
        prompts_dir,
        question=q.stem,
        group="\n".join(f"- {k}" for k in keypoints),
        evidence=evidence,
        conclusions=conclusion.text,
    )
    return parse_verdict(reply)


def derive_role_labels(
    conclusions: Sequence[LocalConclusion], q: Question, gw, prompts_dir: Optional[str] = None
) -> Tuple[RoleLabels, int]:
    """Label conclusions Core/Support/Noise with the judge backend.

    Not part of the original method: used only when a question has no gold role
    annotation. Unparseable replies count as Noise; returns (labels, n_flagged).
    """
    options = "\n".join(f"{k}. {v}" for k, v in q.options.items())
    buckets: Dict[str, set] = {"CORE": set(), "SUPPORT": set(), "NOISE": set()}
    flagged = 0
    for c in conclusions:
        reply = _ask_judge(gw, "judge_role", prompts_dir, question=q.stem, options=options, conclusions=c.text)
        word = _FIRST_WORD_RE.search(reply or "")
        role = word.group(0).upper() if word else ""
        if role not in buckets:
            role = "NOISE"
            flagged += 1
        buckets[role].add(c.group_id)
    return RoleLabels(buckets["CORE"], buckets["SUPPORT"], buckets["NOISE"]), flagged


def answer_accuracy(traces: Sequence[PipelineTrace], golds: Mapping[str, str]) -> float:
    """Share of traces whose chosen option equals gold; failed traces count as wrong."""
    if not traces:
        raise InputError("answer accuracy over zero traces is undefined")
    correct = 0
    for t in traces:
        if t.question_id not in golds:
            raise InputError(f"no gold answer for question {t.question_id!r}")
        if not t.failed and t.aligned_answer is not None and t.aligned_answer.chosen_option == golds[t.question_id]:
            correct += 1
    return correct / len(traces)


@dataclass
class StageMetrics:
    extract: Optional[PrfScores] = None
    group: Optional[PrfScores] = None
    local_accuracy: Optional[float] = None
    global_wif: Optional[float] = None
    answer_accuracy: Optional[float] = None
    n_questions: int = 0
    counts: Dict[str, int] = field(default_factory=dict)
    notes: List[str] = field(default_factory=list)

    @property
    def partial(self) -> bool:
        return bool(self.notes)

    def column(self, name: str) -> Optional[float]:
        """Scalar value for one column of the comparison table."""
        if name == "extract":
            return self.extract.f1 if self.extract else None
        if name == "group":
            return self.group.f1 if self.group else None
        return getattr(self, name if name != "answer" else "answer_accuracy")

    def to_dict(self) -> dict:
        return {
            "extract": self.extract.to_dict() if self.extract else None,
            "group": self.group.to_dict() if self.group else None,
            "local_accuracy": self.local_accuracy,
            "global_wif": self.global_wif,
            "answer_accuracy": self.answer_accuracy,
            "n_questions": self.n_questions,
            "counts": dict(sorted(self.counts.items())),
            "notes": list(self.notes),
            "partial": self.partial,
        }

    @classmethod
    def from_dict(cls, data: dict) -> "StageMetrics":
        def prf(v):
            return PrfScores(v["precision"], v["recall"], v["f1"]) if v else None

        return cls(
            prf(data.get("extract")),
            prf(data.get("group")),
            data.get("local_accuracy"),
            data.get("global_wif"),
            data.get("answer_accuracy"),
            int(data.get("n_questions", 0)),
            dict(data.get("counts", {})),
            list(data.get("notes", [])),
        )


def _mean_prf(scores: Sequence[PrfScores]) -> Optional[PrfScores]:
    if not scores:
        return None
    n = len(scores)
    return PrfScores.from_pr(math.fsum(s.precision for s in scores) / n, math.fsum(s.recall for s in scores) / n)


def stage_report(
    traces: Sequence[PipelineTrace],
    questions: Mapping[str, Question],
    judge_gw=None,
    wif_params: WifParams = WifParams(),
    index: Optional[Index] = None,
    derive_roles: bool = False,
    match_threshold: float = MATCH_THRESHOLD,
    prompts_dir: Optional[str] = None,
) -> StageMetrics:
    """Compute every stage metric for one run configuration.

    A question contributes to a metric only when it carries the gold annotation
    that metric needs; ``counts`` records how many did.
    """
    report = StageMetrics(n_questions=len(traces))
    ordered = sorted(traces, key=lambda t: t.question_id)
    extract_scores, group_scores = [], []
    judged = correct = flagged = skipped = 0
    wifs: List[float] = []
    missing_roles = 0

    for t in ordered:
        q = questions.get(t.question_id)
        if q is None:
            raise InputError(f"trace {t.question_id!r} has no matching question")
        ann = q.annotations
        pred_texts = [k.text for k in t.keypoints or []]

        if ann.keypoints is not None:
            extract_scores.append(extraction_prf(pred_texts, ann.keypoints, match_threshold))

        if ann.grouping is not None and t.groups is not None:
            matches = match_keypoints(pred_texts, ann.keypoints, match_threshold)
            pred_cluster = {i: g.group_id for g in t.groups for i in g.keypoint_indices}
            gold_cluster = partition_from_groups(ann.grouping)
            if matches:
                group_scores.append(
                    bcubed({j: pred_cluster[i] for i, j in matches}, {j: gold_cluster[j] for _, j in matches})
                )

        if judge_gw is not None and t.conclusions is not None:
            kp_text = {k.index: k.text for k in t.keypoints or []}
            groups = {g.group_id: g for g in t.groups or []}
            for c in t.conclusions:
                g = groups[c.group_id]
                if index is not None and g.evidence.entries:
                    evidence = "\n".join(f"[{cid}] {index.chunk(cid).text}" for cid in g.evidence.ids)
                else:
                    evidence = ", ".join(g.evidence.ids) or "(none)"
                try:
                    verdict = judge_local(
                        c, q, judge_gw, [kp_text[i] for i in sorted(g.keypoint_indices)], evidence, prompts_dir
                    )
                except (BackendError, ScriptError):
                    skipped += 1
                    continue
                judged += 1
                correct += verdict.correct
                flagged += verdict.flagged

        if t.selection is not None and t.conclusions is not None:
            roles = ann.roles
            if roles is None and derive_roles and judge_gw is not None:
                try:
                    roles, _ = derive_role_labels(t.conclusions, q, judge_gw, prompts_dir)
                except (BackendError, ScriptError):
                    roles = None
            if roles is None:
                missing_roles += 1
            elif roles.universe != {c.group_id for c in t.conclusions}:
                missing_roles += 1
            else:
                wifs.append(wif_score(t.selection.selected, roles, wif_params))

    report.extract = _mean_prf(extract_scores)
    report.group = _mean_prf(group_scores)
    report.local_accuracy = correct / judged if judged else None
    report.global_wif = math.fsum(wifs) / len(wifs) if wifs else None

    golds = {t.question_id: questions[t.question_id].gold_option for t in ordered}
    with_gold = [t for t in ordered if golds[t.question_id] is not None]
    report.answer_accuracy = answer_accuracy(with_gold, golds) if with_gold else None

    report.counts = {
        "extract": len(extract_scores),
        "group": len(group_scores),
        "local_judged": judged,
        "local_flagged": flagged,
        "local_skipped": skipped,
        "global": len(wifs),
        "answer": len(with_gold),
        "failed": sum(t.failed for t in ordered),
    }
    if skipped:
        report.notes.append(f"{skipped} local judgement(s) skipped after backend errors")
    if missing_roles:
        report.notes.append(f"{missing_roles} question(s) without usable role labels excluded from global WIF")
    return report


COLUMNS = (
    ("extract", "Extract F1", "{:.3f}"),
    ("group", "Group F1", "{:.3f}"),
    ("local_accuracy", "Local Acc (%)", "{:.2f}"),
    ("global_wif", "Global WIF", "{:.2f}"),
    ("answer", "Answer Acc (%)", "{:.2f}"),
)
_PERCENT = {"local_accuracy", "answer"}


def format_cell(metrics: StageMetrics, key: str, fmt: str) -> str:
    value = metrics.column(key)
    if value is None:
        return "n/a"
    return fmt.format(value * 100 if key in _PERCENT else value)


def render_table(rows: Sequence[Tuple[str, StageMetrics]], deltas: Optional[Sequence[Optional[float]]] = None) -> str:
    """Plain-text table in the column order Extract F1 | Group F1 | Local Acc | Global WIF | Answer Acc."""
    header = [""] + [title for _, title, _ in COLUMNS]
    if deltas is not None:
        header.append("Acc. Δ (%)")
    body = []
    for pos, (name, m) in enumerate(rows):
        line = [name] + [format_cell(m, key, fmt) for key, _, fmt in COLUMNS]
        if deltas is not None:
            d = deltas[pos]
            line.append("" if d is None else f"{d * 100:+.2f}")
        body.append(line)
    widths = [max(len(r[c]) for r in [header] + body) for c in range(len(header))]
    out = []
    for r in [header] + body:
        cells = [r[0].ljust(widths[0])] + [cell.rjust(w) for cell, w in zip(r[1:], widths[1:])]
        out.append(" | ".join(cells).rstrip())
    out.insert(1, "-+-".join("-" * w for w in widths))
    return "\n".join(out) + "\n"
