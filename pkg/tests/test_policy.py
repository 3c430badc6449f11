import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from grouprag.errors import InputError, TrainingError
from grouprag.policy import (
    PROB_CEIL,
    PolicyParams,
    RoleLabels,
    SelectionInstance,
    TrainConfig,
    WifParams,
    advantages,
    decision_wif,
    load_instances,
    load_policy,
    log_prob,
    mean_rollout_reward,
    policy_gradient,
    policy_gradient_step,
    policy_loss,
    sample_rollouts,
    save_policy,
    selection_probs,
    separable_instances,
    threshold_select,
    train_policy,
    wif_score,
)

from oracles import all_selections, all_subsets

LABELS = RoleLabels(core={0, 1}, support={2}, noise={3})


class TestWif:
    def test_core_and_support(self):
        assert wif_score({0, 1, 2}, LABELS) == pytest.approx(1.5, abs=1e-9)

    def test_empty_selection(self):
        assert wif_score(set(), LABELS) == 0.0

    def test_half_core_half_noise(self):
        labels = RoleLabels(core={0, 1}, noise={2, 3})
        assert wif_score({0, 2}, labels) == pytest.approx(0.5**2.5 * 0.5**2, abs=1e-9)
        assert wif_score({0, 2}, labels) == pytest.approx(0.044194, abs=1e-6)

    def test_full_noise_recall_annihilates(self):
        assert wif_score({0, 1, 2, 3}, LABELS) == 0.0

    def test_unknown_id(self):
        with pytest.raises(InputError):
            wif_score({7}, LABELS)

    def test_param_order_enforced(self):
        with pytest.raises(InputError):
            WifParams(alpha=1.0, beta=2.0, gamma=0.5)
        with pytest.raises(InputError):
            WifParams(alpha=2.5, beta=0.5, gamma=0.5)

    def test_argmax_small(self):
        scores = {frozenset(s): wif_score(s, LABELS) for s in all_subsets(4)}
        best = max(scores, key=scores.get)
        assert best == frozenset({0, 1, 2})
        assert sorted(scores.values())[-2] < scores[best]

    @given(st.lists(st.sampled_from(["c", "s", "n"]), min_size=1, max_size=8), st.data())
    @settings(max_examples=80, deadline=None)
    def test_bounds(self, roles, data):
        labels = RoleLabels(
            core={i for i, r in enumerate(roles) if r == "c"},
            support={i for i, r in enumerate(roles) if r == "s"},
            noise={i for i, r in enumerate(roles) if r == "n"},
        )
        sel = data.draw(st.sets(st.integers(0, len(roles) - 1)))
        v = wif_score(sel, labels)
        assert 0.0 <= v <= 1.5


class TestProbs:
    def test_zero_params(self):
        p = selection_probs(PolicyParams.zeros(3), np.ones((4, 3)))
        assert np.all(p == 0.5)

    def test_clamped(self):
        p = selection_probs(PolicyParams(np.zeros(2), 30.0), np.ones((3, 2)))
        assert np.all(p == PROB_CEIL)

    def test_logistic_value(self):
        assert selection_probs(PolicyParams([2.0]), np.array([[1.0]]))[0] == pytest.approx(0.880797, abs=1e-6)

    def test_dimension_mismatch(self):
        with pytest.raises(InputError):
            selection_probs(PolicyParams.zeros(3), np.ones((2, 4)))


class TestRollouts:
    def test_certain_probs(self):
        s = sample_rollouts([PROB_CEIL] * 5, 50, 0)
        assert s.all()

    def test_frequency(self):
        s = sample_rollouts([0.5] * 6, 10000, 123)
        assert np.all(np.abs(s.mean(axis=0) - 0.5) < 0.02)

    def test_seeded(self):
        a = sample_rollouts([0.3, 0.6, 0.9], 20, 5)
        b = sample_rollouts([0.3, 0.6, 0.9], 20, 5)
        assert np.array_equal(a, b)
        assert a.shape == (20, 3) and a.dtype == bool

    def test_k_positive(self):
        with pytest.raises(InputError):
            sample_rollouts([0.5], 0, 0)


class TestLogProb:
    def test_values(self):
        assert log_prob([0.5, 0.5], [1, 0]) == pytest.approx(-1.386294, abs=1e-6)
        assert log_prob([0.9], [0]) == pytest.approx(-2.302585, abs=1e-6)

    def test_certain(self):
        assert abs(log_prob([PROB_CEIL] * 3, [1, 1, 1])) < 1e-5

    def test_normalized(self):
        rng = np.random.default_rng(0)
        probs = rng.uniform(0.05, 0.95, size=6)
        total = math.fsum(math.exp(log_prob(probs, s)) for s in all_selections(6))
        assert total == pytest.approx(1.0, abs=1e-9)

    def test_length_mismatch(self):
        with pytest.raises(InputError):
            log_prob([0.5, 0.5], [1])


class TestAdvantages:
    def test_hand_computed(self):
        adv = advantages([1.5, 0.5, 1.0])
        assert adv == pytest.approx([1.224744, -1.224744, 0.0], abs=1e-6)

    def test_equal_rewards(self):
        assert np.all(advantages([0.3] * 8) == 0.0)

    def test_single(self):
        assert advantages([0.7]).tolist() == [0.0]

    @given(st.lists(st.floats(0, 1.5), min_size=2, max_size=16))
    def test_centered(self, rewards):
        adv = advantages(rewards)
        assert abs(adv.sum()) < 1e-9 * len(rewards)

    def test_empty(self):
        with pytest.raises(InputError):
            advantages([])


class TestThreshold:
    def test_threshold(self):
        assert threshold_select([0.9, 0.2, 0.7]) == ({0, 2}, False)

    def test_rescue(self):
        assert threshold_select([0.1, 0.2]) == ({1}, True)


def random_instance(rng, n=None, d=8):
    n = n or int(rng.integers(2, 7))
    roles = rng.integers(0, 3, size=n)
    labels = RoleLabels(
        core=set(np.flatnonzero(roles == 0).tolist()),
        support=set(np.flatnonzero(roles == 1).tolist()),
        noise=set(np.flatnonzero(roles == 2).tolist()),
    )
    return SelectionInstance("r", rng.normal(size=(n, d)), labels)


def finite_difference(params, inst, sel, adv, h=1e-6):
    def loss_at(w, b):
        return policy_loss(PolicyParams(w, b), inst, sel, adv)

    grad_w = np.zeros_like(params.weights)
    for j in range(params.dim):
        up, down = params.weights.copy(), params.weights.copy()
        up[j] += h
        down[j] -= h
        grad_w[j] = (loss_at(up, params.bias) - loss_at(down, params.bias)) / (2 * h)
    grad_b = (loss_at(params.weights, params.bias + h) - loss_at(params.weights, params.bias - h)) / (2 * h)
    return grad_w, grad_b


class TestGradient:
    def test_matches_finite_differences(self):
        rng = np.random.default_rng(11)
        for _ in range(5):
            inst = random_instance(rng)
            params = PolicyParams(rng.normal(scale=0.3, size=8), rng.normal(scale=0.3))
            sel = sample_rollouts(selection_probs(params, inst), 8, rng.integers(1 << 30))
            adv = rng.normal(size=8)
            gw, gb = policy_gradient(params, inst, sel, adv)
            nw, nb = finite_difference(params, inst, sel, adv)
            assert np.allclose(gw, nw, rtol=1e-5, atol=1e-8)
            assert gb == pytest.approx(nb, rel=1e-5, abs=1e-8)

    def test_equal_rewards_leave_params(self):
        inst = SelectionInstance("x", np.ones((3, 2)), RoleLabels(core={0, 1, 2}))
        # all p = 1 after clamping: every rollout selects everything, all rewards 1
        params = PolicyParams(np.zeros(2), 30.0)
        new, reward = policy_gradient_step(params, inst, k=4, lr=0.5, seed=0)
        assert reward == 1.0
        assert np.array_equal(new.weights, params.weights) and new.bias == params.bias

    def test_nonfinite_gradient_aborts(self, monkeypatch):
        import grouprag.policy as pol

        monkeypatch.setattr(pol, "advantages", lambda r: np.full(len(r), np.nan))
        inst = separable_instances(1, seed=0)[0]
        with pytest.raises(TrainingError, match=inst.question_id):
            policy_gradient_step(PolicyParams.zeros(8), inst, seed=0)


class TestTraining:
    def test_learns_separable_benchmark(self):
        data = separable_instances(100, seed=7)
        cfg = TrainConfig(k=8, lr=0.1, epochs=5, seed=7)
        params, history = train_policy(data, cfg)
        baseline = mean_rollout_reward(PolicyParams.zeros(8), data, k=8, seed=7)
        final = mean_rollout_reward(params, data, k=8, seed=7)
        assert len(history) == 5
        assert final >= 1.4
        assert final >= baseline + 0.3
        assert decision_wif(params, data) == pytest.approx(1.5)
        assert params.weights[0] > 0 > params.weights[1]

    def test_zero_epochs(self):
        params, history = train_policy(separable_instances(5), TrainConfig(epochs=0))
        assert history == []
        assert np.all(params.weights == 0) and params.bias == 0.0

    def test_deterministic(self):
        data = separable_instances(20, seed=1)
        a = train_policy(data, TrainConfig(epochs=2, seed=3))
        b = train_policy(data, TrainConfig(epochs=2, seed=3))
        assert np.array_equal(a[0].weights, b[0].weights) and a[0].bias == b[0].bias
        assert a[1] == b[1]

    def test_dimension_mismatch(self):
        data = separable_instances(2, dim=8) + separable_instances(1, dim=4)
        with pytest.raises(InputError, match="expected 8"):
            train_policy(data)

    def test_empty_dataset(self):
        with pytest.raises(InputError):
            train_policy([])


class TestIO:
    def test_instances_round_trip(self, tmp_path):
        data = separable_instances(3, seed=2)
        path = tmp_path / "inst.jsonl"
        path.write_text("".join(json.dumps(i.to_dict()) + "\n" for i in data))
        loaded = load_instances(path)
        assert [i.question_id for i in loaded] == [i.question_id for i in data]
        assert all(np.array_equal(a.features, b.features) and a.labels == b.labels for a, b in zip(data, loaded))

    def test_bad_line_number(self, tmp_path):
        good = json.dumps(separable_instances(1)[0].to_dict())
        path = tmp_path / "inst.jsonl"
        path.write_text(good + "\n" + good + "\n{oops\n")
        with pytest.raises(InputError, match=":3:"):
            load_instances(path)

    def test_labels_must_cover_conclusions(self):
        with pytest.raises(InputError):
            SelectionInstance("q", np.ones((3, 2)), RoleLabels(core={0}, noise={1}))

    def test_policy_round_trip(self, tmp_path):
        params = PolicyParams([0.5, -1.25], 0.75)
        save_policy(tmp_path / "p.json", params, WifParams(3.0, 2.0, 1.0))
        loaded, wif = load_policy(tmp_path / "p.json")
        assert np.array_equal(loaded.weights, params.weights) and loaded.bias == params.bias
        assert wif == WifParams(3.0, 2.0, 1.0)
        assert loaded.fingerprint() == params.fingerprint()

    def test_separable_has_every_role(self):
        for inst in separable_instances(30, seed=4):
            assert inst.labels.core and inst.labels.support and inst.labels.noise
            assert np.array_equal(inst.features[:, 0] == 1, np.isin(np.arange(inst.n), list(inst.labels.core)))
