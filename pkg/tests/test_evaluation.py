import numpy as np
import pytest

from grouprag.errors import InputError
from grouprag.evaluation import (
    PrfScores,
    StageMetrics,
    answer_accuracy,
    bcubed,
    derive_role_labels,
    extraction_prf,
    judge_local,
    match_keypoints,
    parse_verdict,
    partition_from_groups,
    render_table,
    stage_report,
    token_f1,
)
from grouprag.policy import RoleLabels
from grouprag.records import (
    AlignedAnswer,
    GoldAnnotations,
    Keypoint,
    KeypointGroup,
    LocalConclusion,
    PipelineTrace,
    Question,
    SelectionRecord,
)
from grouprag.retrieval import RankedHits

from conftest import mock_gateway
from oracles import bcubed_bruteforce


class TestExtraction:
    GOLD = ["fever", "productive cough", "pleuritic chest pain", "age 67"]

    def test_identity(self):
        assert extraction_prf(self.GOLD, self.GOLD) == PrfScores(1.0, 1.0, 1.0)

    def test_three_of_four_plus_spurious(self):
        pred = ["fever", "productive cough", "pleuritic chest pain", "smoker"]
        s = extraction_prf(pred, self.GOLD)
        assert (s.precision, s.recall, s.f1) == pytest.approx((0.75, 0.75, 0.75))

    def test_empty_prediction(self):
        assert extraction_prf([], self.GOLD) == PrfScores(0.0, 0.0, 0.0)

    def test_paraphrase_above_threshold(self):
        assert token_f1("chest pain pleuritic", "pleuritic chest pain") == 1.0
        assert extraction_prf(["pleuritic pain in chest"], ["pleuritic chest pain"]).f1 == 1.0

    def test_one_to_one(self):
        # two predictions that both match one gold item only count once
        matches = match_keypoints(["fever", "Fever!"], ["fever"])
        assert len(matches) == 1

    def test_order_independent(self):
        pred = ["chest pain", "pain", "chest pain severe", "fever high"]
        gold = ["chest pain", "high fever", "severe pain"]
        n = len(match_keypoints(pred, gold))
        for perm in ([3, 2, 1, 0], [1, 3, 0, 2]):
            assert len(match_keypoints([pred[i] for i in perm], gold)) == n


class TestBCubed:
    GOLD = {"a": 0, "b": 0, "c": 1}

    def test_identity(self):
        assert bcubed(self.GOLD, self.GOLD) == PrfScores(1.0, 1.0, 1.0)

    def test_all_singletons(self):
        s = bcubed({"a": 0, "b": 1, "c": 2}, self.GOLD)
        assert s.precision == 1.0
        assert s.recall == pytest.approx(2 / 3, abs=1e-12)
        assert s.f1 == pytest.approx(0.8, abs=1e-9)

    def test_one_cluster(self):
        s = bcubed({"a": 0, "b": 0, "c": 0}, self.GOLD)
        assert s.precision == pytest.approx(5 / 9, abs=1e-12)
        assert s.recall == 1.0
        assert s.f1 == pytest.approx(5 / 7, abs=1e-9)

    def test_universe_mismatch(self):
        with pytest.raises(InputError):
            bcubed({"a": 0}, self.GOLD)

    def test_empty(self):
        with pytest.raises(InputError):
            bcubed({}, {})

    def test_item_mean_mode(self):
        s = bcubed({"a": 0, "b": 1, "c": 2}, self.GOLD, f1_mode="item_mean")
        # per item: a,b have P=1,R=1/2 -> 2/3; c has P=R=1
        assert s.f1 == pytest.approx((2 / 3 + 2 / 3 + 1) / 3, abs=1e-12)

    def test_matches_oracle(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            n = int(rng.integers(1, 12))
            pred = {i: int(rng.integers(0, n)) for i in range(n)}
            gold = {i: int(rng.integers(0, n)) for i in range(n)}
            s = bcubed(pred, gold)
            assert (s.precision, s.recall, s.f1) == bcubed_bruteforce(pred, gold)

    def test_partition_helper(self):
        assert partition_from_groups([["a", "b"], ["c"]]) == self.GOLD


class TestJudge:
    @pytest.mark.parametrize(
        "reply, expected",
        [
            ("CORRECT", (True, False)),
            ("INCORRECT - contradicts evidence", (False, False)),
            ("correct.", (True, False)),
            ("Verdict: CORRECT", (True, False)),
            ("It is hard to say.", (False, True)),
            ("Both CORRECT and INCORRECT in parts", (False, True)),
            ("", (False, True)),
        ],
    )
    def test_parse(self, reply, expected):
        assert tuple(parse_verdict(reply)) == expected

    def test_judge_local(self, question):
        gw = mock_gateway([("judge", "pneumonia", "CORRECT")], default="maybe")
        ok = judge_local(LocalConclusion(0, "consistent with pneumonia"), question, gw)
        unsure = judge_local(LocalConclusion(1, "something else"), question, gw)
        assert ok == (True, False)
        assert unsure == (False, True)

    def test_derive_roles(self, question):
        gw = mock_gateway([("judge", "lobar consolidation", "CORE"), ("judge", "elderly", "support: helps")], default="???")
        cs = [LocalConclusion(0, "lobar consolidation"), LocalConclusion(1, "elderly"), LocalConclusion(2, "thyroid")]
        labels, flagged = derive_role_labels(cs, question, gw)
        assert labels == RoleLabels(core={0}, support={1}, noise={2})
        assert flagged == 1


def answered(qid, letter=None, failed=False):
    t = PipelineTrace(question_id=qid, seed=0)
    if failed:
        t.failed_at = "align"
    elif letter:
        t.aligned_answer = AlignedAnswer(letter)
    return t


class TestAnswerAccuracy:
    def test_ratio(self):
        traces = [answered("a", "A"), answered("b", "B"), answered("c", "C"), answered("d", "A")]
        assert answer_accuracy(traces, {"a": "A", "b": "B", "c": "C", "d": "D"}) == 0.75

    def test_all_failed(self):
        traces = [answered("a", failed=True), answered("b", failed=True)]
        assert answer_accuracy(traces, {"a": "A", "b": "B"}) == 0.0

    def test_empty(self):
        with pytest.raises(InputError):
            answer_accuracy([], {})

    def test_missing_gold(self):
        with pytest.raises(InputError):
            answer_accuracy([answered("a", "A")], {})


def full_trace(q, selected):
    kps = [Keypoint(i, t) for i, t in enumerate(q.annotations.keypoints)]
    groups = [KeypointGroup(i, frozenset(g), f"g{i}", RankedHits("x", 3)) for i, g in enumerate(q.annotations.grouping)]
    conclusions = [LocalConclusion(i, f"conclusion {i}") for i in range(len(groups))]
    t = PipelineTrace(question_id=q.id, seed=0, keypoints=kps, groups=groups, conclusions=conclusions)
    t.selection = SelectionRecord("policy", sorted(selected))
    t.aligned_answer = AlignedAnswer(q.gold_option)
    return t


def annotated_question(qid, roles):
    return Question(
        qid,
        "stem",
        {"A": "x", "B": "y"},
        "A",
        GoldAnnotations(["fever", "cough", "rash"], [[0, 1], [2]], roles),
    )


class TestStageReport:
    def test_optimal_selection_scores_max(self):
        roles = RoleLabels(core={0}, support={1})
        qs = {f"q{i}": annotated_question(f"q{i}", roles) for i in range(3)}
        traces = [full_trace(q, {0, 1}) for q in qs.values()]
        report = stage_report(traces, qs)
        assert report.global_wif == pytest.approx(1.5)
        assert report.extract.f1 == 1.0 and report.group.f1 == 1.0
        assert report.answer_accuracy == 1.0
        assert report.local_accuracy is None
        assert not report.partial

    def test_missing_grouping_is_na(self):
        q = Question("q", "stem", {"A": "x", "B": "y"}, "A", GoldAnnotations(["fever"], None, None))
        t = PipelineTrace("q", 0, keypoints=[Keypoint(0, "fever")])
        t.aligned_answer = AlignedAnswer("A")
        report = stage_report([t], {"q": q})
        assert report.group is None and report.global_wif is None
        assert report.extract.f1 == 1.0 and report.answer_accuracy == 1.0
        assert "n/a" in render_table([("run", report)])

    def test_local_accuracy_micro_average(self):
        roles = RoleLabels(core={0}, support={1})
        q = annotated_question("q", roles)
        t = full_trace(q, {0})
        gw = mock_gateway([("judge", "conclusion 0", "CORRECT")], default="INCORRECT")
        report = stage_report([t], {"q": q}, judge_gw=gw)
        assert report.local_accuracy == 0.5
        assert report.counts["local_judged"] == 2

    def test_judge_failure_skips_item(self):
        q = annotated_question("q", RoleLabels(core={0}, support={1}))
        gw = mock_gateway([("judge", "conclusion 0", "CORRECT")])
        report = stage_report([full_trace(q, {0})], {"q": q}, judge_gw=gw)
        assert report.counts["local_skipped"] == 1
        assert report.local_accuracy == 1.0
        assert report.partial

    def test_metrics_round_trip(self):
        m = StageMetrics(PrfScores(1, 0.5, 2 / 3), None, 0.5, 1.2, 0.8, 4, {"x": 1}, ["note"])
        assert StageMetrics.from_dict(m.to_dict()) == m

    def test_table_layout(self):
        m = StageMetrics(PrfScores.from_pr(0.9, 0.9), PrfScores.from_pr(0.8, 0.8), 0.7314, 1.13, 0.7175)
        table = render_table([("GroupRAG", m), ("-Ext. Train", m)], deltas=[None, -0.01])
        lines = table.splitlines()
        assert "Extract F1" in lines[0] and "Acc. Δ (%)" in lines[0]
        assert "73.14" in lines[2] and "71.75" in lines[2] and "1.13" in lines[2]
        assert lines[3].rstrip().endswith("-1.00")
