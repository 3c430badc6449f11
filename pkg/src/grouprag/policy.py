"""WIF reward and the Bernoulli selection policy trained with policy gradients.

The selector scores each local conclusion with a logistic head over a small
feature vector. Training samples K selections per question, rewards each with
the Weighted Inference F-score, normalizes rewards within the rollout group and
takes a plain gradient-descent step on

    L = -(1/K) * sum_k A_k * log pi(P_k | x)

with the advantages A_k held constant.
"""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, Iterable, List, Optional, Sequence, Set, Tuple, Union

import numpy as np

from .errors import InputError, TrainingError

logger = logging.getLogger(__name__)

PROB_FLOOR = 1e-6
PROB_CEIL = 1.0 - 1e-6
ADV_EPSILON = 1e-8

SeedLike = Union[int, np.random.SeedSequence, None]


@dataclass(frozen=True)
class WifParams:
    alpha: float = 2.5
    beta: float = 2.0
    gamma: float = 0.5

    def __post_init__(self) -> None:
        if not (self.alpha >= self.beta > self.gamma >= 0):
            raise InputError(
                f"WIF params must satisfy alpha >= beta > gamma >= 0, got "
                f"alpha={self.alpha}, beta={self.beta}, gamma={self.gamma}"
            )

    def to_dict(self) -> Dict[str, float]:
        return {"alpha": self.alpha, "beta": self.beta, "gamma": self.gamma}

    @classmethod
    def from_dict(cls, data: Optional[dict]) -> "WifParams":
        data = data or {}
        return cls(
            alpha=float(data.get("alpha", 2.5)),
            beta=float(data.get("beta", 2.0)),
            gamma=float(data.get("gamma", 0.5)),
        )


@dataclass(frozen=True)
class RoleLabels:
    """Core / Support / Noise partition of one question's conclusion ids."""

    core: frozenset = frozenset()
    support: frozenset = frozenset()
    noise: frozenset = frozenset()

    def __post_init__(self) -> None:
        object.__setattr__(self, "core", frozenset(self.core))
        object.__setattr__(self, "support", frozenset(self.support))
        object.__setattr__(self, "noise", frozenset(self.noise))
        if self.core & self.support or self.core & self.noise or self.support & self.noise:
            raise InputError("role label sets must be pairwise disjoint")

    @property
    def universe(self) -> frozenset:
        return self.core | self.support | self.noise

    def role_of(self, cid: int) -> Optional[str]:
        if cid in self.core:
            return "Core"
        if cid in self.support:
            return "Support"
        if cid in self.noise:
            return "Noise"
        return None

    def to_dict(self) -> Dict[str, List[int]]:
        return {
            "core": sorted(self.core),
            "support": sorted(self.support),
            "noise": sorted(self.noise),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "RoleLabels":
        try:
            return cls(
                core=frozenset(int(i) for i in data.get("core", [])),
                support=frozenset(int(i) for i in data.get("support", [])),
                noise=frozenset(int(i) for i in data.get("noise", [])),
            )
        except (TypeError, ValueError, AttributeError) as exc:
            raise InputError(f"malformed role labels: {data!r}") from exc


@dataclass
class SelectionInstance:
    question_id: str
    features: np.ndarray
    labels: RoleLabels

    def __post_init__(self) -> None:
        self.features = np.asarray(self.features, dtype=np.float64)
        if self.features.ndim != 2 or self.features.shape[0] == 0:
            raise InputError(f"{self.question_id}: features must be a non-empty (n, d) matrix")
        if not np.all(np.isfinite(self.features)):
            raise InputError(f"{self.question_id}: non-finite feature value")
        if self.labels.universe != frozenset(range(self.features.shape[0])):
            raise InputError(
                f"{self.question_id}: role labels must cover conclusion ids "
                f"0..{self.features.shape[0] - 1} exactly"
            )

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def to_dict(self) -> dict:
        return {
            "qid": self.question_id,
            "features": self.features.tolist(),
            "labels": self.labels.to_dict(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "SelectionInstance":
        try:
            return cls(str(data["qid"]), data["features"], RoleLabels.from_dict(data["labels"]))
        except KeyError as exc:
            raise InputError(f"selection instance missing field {exc}") from exc
        except (TypeError, ValueError) as exc:
            if isinstance(exc, InputError):
                raise
            raise InputError(f"malformed selection instance: {exc}") from exc


@dataclass
class PolicyParams:
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self) -> None:
        self.weights = np.asarray(self.weights, dtype=np.float64).reshape(-1)
        self.bias = float(self.bias)
        if not (np.all(np.isfinite(self.weights)) and np.isfinite(self.bias)):
            raise InputError("policy params must be finite")

    @classmethod
    def zeros(cls, dim: int) -> "PolicyParams":
        return cls(np.zeros(dim), 0.0)

    @property
    def dim(self) -> int:
        return self.weights.shape[0]

    def fingerprint(self) -> str:
        payload = json.dumps({"w": self.weights.tolist(), "b": self.bias})
        return hashlib.sha256(payload.encode("utf-8")).hexdigest()[:16]

    def to_dict(self, wif: Optional[WifParams] = None) -> dict:
        return {
            "dim": self.dim,
            "weights": self.weights.tolist(),
            "bias": self.bias,
            "wif_params": (wif or WifParams()).to_dict(),
            "fingerprint": self.fingerprint(),
        }

    @classmethod
    def from_dict(cls, data: dict) -> "PolicyParams":
        params = cls(data["weights"], data.get("bias", 0.0))
        if "dim" in data and int(data["dim"]) != params.dim:
            raise InputError(f"policy dim {data['dim']} does not match {params.dim} weights")
        return params


@dataclass
class Rollout:
    selection: np.ndarray
    reward: float
    log_prob: float
    advantage: float = 0.0


@dataclass
class TrainConfig:
    k: int = 8
    lr: float = 0.1
    epochs: int = 5
    seed: int = 0
    wif: WifParams = field(default_factory=WifParams)


def wif_score(selection: Iterable[int], labels: RoleLabels, params: WifParams = WifParams()) -> float:
    """Weighted Inference F-score of a selected set of conclusion ids."""
    chosen = set(selection)
    unknown = chosen - labels.universe
    if unknown:
        raise InputError(f"selection contains unknown conclusion ids {sorted(unknown)}")
    if not chosen:
        return 0.0
    core, support, noise = labels.core, labels.support, labels.noise
    r_core = len(chosen & core) / len(core) if core else 1.0
    r_support = len(chosen & support) / len(support) if support else 0.0
    r_noise = len(chosen & noise) / len(noise) if noise else 0.0
    return r_core**params.alpha * (1.0 - r_noise) ** params.beta * (1.0 + params.gamma * r_support)


def _sigmoid(z: np.ndarray) -> np.ndarray:
    out = np.empty_like(z)
    pos = z >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-z[pos]))
    ez = np.exp(z[~pos])
    out[~pos] = ez / (1.0 + ez)
    return out


def _logits(params: PolicyParams, features: np.ndarray) -> np.ndarray:
    if features.shape[1] != params.dim:
        raise InputError(f"feature dimension {features.shape[1]} != policy dimension {params.dim}")
    return features @ params.weights + params.bias


def selection_probs(params: PolicyParams, inst: Union[SelectionInstance, np.ndarray]) -> np.ndarray:
    features = inst.features if isinstance(inst, SelectionInstance) else np.atleast_2d(inst)
    return np.clip(_sigmoid(_logits(params, features)), PROB_FLOOR, PROB_CEIL)


def sample_rollouts(probs: Sequence[float], k: int, rng_seed: SeedLike) -> np.ndarray:
    """Draw ``k`` independent Bernoulli selections; returns a (k, n) bool matrix."""
    if k < 1:
        raise InputError("K must be >= 1")
    probs = np.asarray(probs, dtype=np.float64)
    rng = np.random.default_rng(rng_seed)
    return rng.random((k, probs.shape[0])) < probs


def log_prob(probs: Sequence[float], selection: Sequence[bool]) -> float:
    probs = np.asarray(probs, dtype=np.float64)
    sel = np.asarray(selection, dtype=bool)
    if probs.shape != sel.shape:
        raise InputError(f"probs length {probs.shape} != selection length {sel.shape}")
    return float(np.sum(np.where(sel, np.log(probs), np.log1p(-probs))))


def advantages(rewards: Sequence[float], epsilon: float = ADV_EPSILON) -> np.ndarray:
    r = np.asarray(rewards, dtype=np.float64)
    if r.size == 0:
        raise InputError("advantages need at least one reward")
    if epsilon <= 0:
        raise InputError("epsilon must be positive")
    # equal rewards must give exact zeros; a float mean can miss them by an ulp
    if np.all(r == r[0]):
        return np.zeros_like(r)
    return (r - r.mean()) / (r.std() + epsilon)


def selected_ids(selection: Sequence[bool]) -> Set[int]:
    return {int(i) for i in np.flatnonzero(np.asarray(selection, dtype=bool))}


def threshold_select(probs: Sequence[float], threshold: float = 0.5) -> Tuple[Set[int], bool]:
    """Inference-time decision rule.

    Takes every conclusion with probability >= threshold. An empty result is
    replaced by the single most probable conclusion (lowest id on ties), since an
    empty selection always scores zero. Returns ``(ids, rescued)``.
    """
    probs = np.asarray(probs, dtype=np.float64)
    if probs.size == 0:
        raise InputError("cannot select from zero conclusions")
    chosen = {int(i) for i in np.flatnonzero(probs >= threshold)}
    if chosen:
        return chosen, False
    return {int(np.argmax(probs))}, True


def policy_loss(
    params: PolicyParams, inst: SelectionInstance, selections: np.ndarray, adv: np.ndarray
) -> float:
    probs = selection_probs(params, inst)
    logps = np.array([log_prob(probs, s) for s in selections])
    return float(-np.mean(adv * logps))


def policy_gradient(
    params: PolicyParams, inst: SelectionInstance, selections: np.ndarray, adv: np.ndarray
) -> Tuple[np.ndarray, float]:
    """Analytic gradient of the loss w.r.t. (weights, bias) at fixed rollouts."""
    raw = _sigmoid(_logits(params, inst.features))
    probs = np.clip(raw, PROB_FLOOR, PROB_CEIL)
    # clamped probabilities are flat in the logits
    live = (raw > PROB_FLOOR) & (raw < PROB_CEIL)
    sel = np.asarray(selections, dtype=np.float64)
    k = sel.shape[0]
    grad_logits = -(np.asarray(adv, dtype=np.float64) @ (sel - probs)) / k * live
    return inst.features.T @ grad_logits, float(grad_logits.sum())


def score_rollouts(
    probs: np.ndarray, selections: np.ndarray, labels: RoleLabels, wif: WifParams
) -> List[Rollout]:
    rewards = [wif_score(selected_ids(s), labels, wif) for s in selections]
    adv = advantages(rewards)
    return [
        Rollout(selection=s, reward=r, log_prob=log_prob(probs, s), advantage=float(a))
        for s, r, a in zip(selections, rewards, adv)
    ]


def policy_gradient_step(
    params: PolicyParams,
    inst: SelectionInstance,
    k: int = 8,
    lr: float = 0.1,
    seed: SeedLike = None,
    wif: WifParams = WifParams(),
) -> Tuple[PolicyParams, float]:
    probs = selection_probs(params, inst)
    selections = sample_rollouts(probs, k, seed)
    rollouts = score_rollouts(probs, selections, inst.labels, wif)
    adv = np.array([r.advantage for r in rollouts])
    grad_w, grad_b = policy_gradient(params, inst, selections, adv)
    if not (np.all(np.isfinite(grad_w)) and np.isfinite(grad_b)):
        raise TrainingError(
            f"non-finite gradient on {inst.question_id}: weights={params.weights.tolist()} "
            f"bias={params.bias} advantages={adv.tolist()}"
        )
    mean_reward = float(np.mean([r.reward for r in rollouts]))
    return PolicyParams(params.weights - lr * grad_w, params.bias - lr * grad_b), mean_reward


def _check_dims(dataset: Sequence[SelectionInstance]) -> int:
    if not dataset:
        raise InputError("training dataset is empty")
    dim = dataset[0].dim
    for inst in dataset:
        if inst.dim != dim:
            raise InputError(
                f"instance {inst.question_id} has feature dimension {inst.dim}, expected {dim}"
            )
    return dim


def train_policy(
    dataset: Sequence[SelectionInstance], cfg: TrainConfig = TrainConfig()
) -> Tuple[PolicyParams, List[float]]:
    """Run ``cfg.epochs`` shuffled passes of single-instance gradient steps.

    Returns the final params and the mean rollout reward of each epoch.
    """
    dim = _check_dims(dataset)
    params = PolicyParams.zeros(dim)
    history: List[float] = []
    rng = np.random.default_rng(cfg.seed)
    for epoch in range(cfg.epochs):
        rewards = []
        for idx in rng.permutation(len(dataset)):
            step_seed = int(rng.integers(2**63))
            params, reward = policy_gradient_step(
                params, dataset[idx], cfg.k, cfg.lr, step_seed, cfg.wif
            )
            rewards.append(reward)
        history.append(float(np.mean(rewards)))
        logger.info("epoch %d mean WIF %.4f", epoch + 1, history[-1])
    return params, history


def mean_rollout_reward(
    params: PolicyParams,
    dataset: Sequence[SelectionInstance],
    k: int = 8,
    seed: int = 0,
    wif: WifParams = WifParams(),
) -> float:
    """Mean WIF of ``k`` sampled selections per instance under fixed params."""
    _check_dims(dataset)
    seeds = np.random.SeedSequence(seed).spawn(len(dataset))
    total = []
    for inst, ss in zip(dataset, seeds):
        probs = selection_probs(params, inst)
        for s in sample_rollouts(probs, k, ss):
            total.append(wif_score(selected_ids(s), inst.labels, wif))
    return float(np.mean(total))


def decision_wif(
    params: PolicyParams, dataset: Sequence[SelectionInstance], wif: WifParams = WifParams()
) -> float:
    """Mean WIF of the deterministic threshold decision over a dataset."""
    _check_dims(dataset)
    scores = []
    for inst in dataset:
        chosen, _ = threshold_select(selection_probs(params, inst))
        scores.append(wif_score(chosen, inst.labels, wif))
    return float(np.mean(scores))


def load_instances(path: Union[str, Path]) -> List[SelectionInstance]:
    """Read a SelectionInstance JSONL file; errors carry the 1-based line number."""
    out: List[SelectionInstance] = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                out.append(SelectionInstance.from_dict(json.loads(line)))
            except (json.JSONDecodeError, InputError, AttributeError, TypeError) as exc:
                raise InputError(f"{path}:{lineno}: {exc}") from exc
    return out


def save_policy(path: Union[str, Path], params: PolicyParams, wif: Optional[WifParams] = None) -> None:
    Path(path).write_text(json.dumps(params.to_dict(wif), indent=2) + "\n", encoding="utf-8")


def load_policy(path: Union[str, Path]) -> Tuple[PolicyParams, WifParams]:
    data = json.loads(Path(path).read_text(encoding="utf-8"))
    return PolicyParams.from_dict(data), WifParams.from_dict(data.get("wif_params"))


def separable_instances(
    n_instances: int = 100, dim: int = 8, seed: int = 0, max_per_role: int = 3
) -> List[SelectionInstance]:
    """Synthetic benchmark: feature 0 flags Core, feature 1 flags Noise.

    Every instance has at least one conclusion of each role, so the best
    achievable WIF is ``1 + gamma``. Remaining features are uniform noise.
    """
    if dim < 2:
        raise InputError("separable benchmark needs dim >= 2")
    rng = np.random.default_rng(seed)
    out = []
    for q in range(n_instances):
        counts = rng.integers(1, max_per_role + 1, size=3)
        roles = np.repeat(np.arange(3), counts)
        rng.shuffle(roles)
        feats = rng.random((roles.size, dim))
        feats[:, 0] = (roles == 0).astype(float)
        feats[:, 1] = (roles == 2).astype(float)
        labels = RoleLabels(
            core=frozenset(np.flatnonzero(roles == 0).tolist()),
            support=frozenset(np.flatnonzero(roles == 1).tolist()),
            noise=frozenset(np.flatnonzero(roles == 2).tolist()),
        )
        out.append(SelectionInstance(f"syn-{q:03d}", feats, labels))
    return out
