"""Log-linear plan scorer: the stand-in for the planner's plan distribution.

Each (instruction, plan) pair is mapped to a fixed-length feature vector and
scored by a dot product. The softmax of scores over an instruction's live
candidates is the plan distribution; its negative log is the plan NLL used
for re-ranking. Training is SFT (uniform target over generated variants)
followed by reference-free DPO on preference pairs.
"""

from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass
from typing import Mapping, Sequence

import numpy as np

from .ontology import ExpandedPlan
from .rng import derive_seed


class TrainingError(RuntimeError):
    def __init__(self, message: str, diagnostics: dict | None = None):
        super().__init__(message)
        self.diagnostics = diagnostics or {}


@dataclass(frozen=True)
class PlanFeaturizer:
    """Feature layout (in order):

    bag of subtasks (B) | length / B | goal coverage | adjacent-pair counts (P)
    | instruction-goal indicators (B) | normalised step positions (B) | bias
    """

    bank_size: int
    pair_cap: int = 256

    @property
    def size(self) -> int:
        return 3 * self.bank_size + 3 + self.pair_cap

    def schema_hash(self) -> str:
        desc = f"bag|len|cov|pairs{self.pair_cap}|goals|pos|bias;B={self.bank_size}"
        return hashlib.sha256(desc.encode()).hexdigest()[:16]

    def pair_index(self, a: int, b: int) -> int:
        # exact while B*B fits the cap, hashed (mod) beyond that
        return (a * self.bank_size + b) % self.pair_cap

    def featurize(self, goals: Sequence[int], steps: Sequence[int]) -> np.ndarray:
        B, P = self.bank_size, self.pair_cap
        f = np.zeros(self.size)
        for s in steps:
            f[s] = 1.0
        f[B] = len(steps) / B
        present = set(steps)
        f[B + 1] = sum(g in present for g in goals) / max(len(goals), 1)
        off = B + 2
        for a, b in zip(steps, steps[1:]):
            f[off + self.pair_index(a, b)] += 1.0
        off += P
        for g in goals:
            f[off + g] = 1.0
        off += B
        denom = max(len(steps) - 1, 1)
        for i, s in enumerate(steps):
            f[off + s] = i / denom
        f[-1] = 1.0
        return f


@dataclass
class PlannerModel:
    featurizer: PlanFeaturizer
    weights: np.ndarray
    version: int = 0

    @classmethod
    def init(cls, featurizer: PlanFeaturizer, seed: int = 0, scale: float = 0.1) -> "PlannerModel":
        """Small random weights stand in for the zero-shot planner's arbitrary preferences."""
        rng = np.random.default_rng(derive_seed(seed, "planner-init"))
        return cls(featurizer, rng.normal(0.0, scale, featurizer.size) if scale > 0
                   else np.zeros(featurizer.size))

    def copy(self) -> "PlannerModel":
        return PlannerModel(self.featurizer, self.weights.copy(), self.version)

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "feature_schema_hash": self.featurizer.schema_hash(),
            "bank_size": self.featurizer.bank_size,
            "pair_cap": self.featurizer.pair_cap,
            "weights": [float(w) for w in self.weights],
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "PlannerModel":
        fz = PlanFeaturizer(doc["bank_size"], doc["pair_cap"])
        if fz.schema_hash() != doc["feature_schema_hash"]:
            raise ValueError("planner checkpoint feature schema does not match")
        w = np.asarray(doc["weights"], dtype=np.float64)
        if w.shape != (fz.size,):
            raise ValueError("planner checkpoint has the wrong number of weights")
        return cls(fz, w, doc["version"])


def save_planner(path, model: PlannerModel) -> None:
    with open(path, "w") as fh:
        json.dump(model.to_json(), fh, sort_keys=True)


def load_planner(path) -> PlannerModel:
    with open(path) as fh:
        return PlannerModel.from_json(json.load(fh))


# ---------------------------------------------------------------------------
# scoring


def candidate_matrix(
    featurizer: PlanFeaturizer, goals: Sequence[int], plans: Sequence[ExpandedPlan]
) -> np.ndarray:
    return np.stack([featurizer.featurize(goals, p.steps) for p in plans])


def _log_softmax(s: np.ndarray) -> np.ndarray:
    m = s.max()
    return s - (m + math.log(np.exp(s - m).sum()))


def log_probs(weights: np.ndarray, feats: np.ndarray) -> np.ndarray:
    if feats.shape[0] == 0:
        raise ValueError("candidate set is empty")
    return _log_softmax(feats @ weights)


def nll(model: PlannerModel, feats: np.ndarray, index: int) -> float:
    """-log softmax(score)[index] over the candidate rows of ``feats``."""
    return float(-log_probs(model.weights, feats)[index])


def nll_all(model: PlannerModel, feats: np.ndarray) -> np.ndarray:
    return -log_probs(model.weights, feats)


@dataclass
class CandidateGroup:
    """An instruction's live candidates with their feature rows."""

    instruction_id: int
    goals: tuple[int, ...]
    plans: list[ExpandedPlan]
    feats: np.ndarray

    def row(self, variant: int) -> int:
        for i, p in enumerate(self.plans):
            if p.variant == variant:
                return i
        raise KeyError(variant)


def build_groups(
    featurizer: PlanFeaturizer,
    pool: Mapping[int, Sequence[ExpandedPlan]],
    goal_plans: Mapping[int, Sequence[int]],
) -> dict[int, CandidateGroup]:
    groups = {}
    for iid in sorted(pool):
        plans = list(pool[iid])
        if not plans:
            raise ValueError(f"instruction {iid} has no candidates")
        goals = tuple(goal_plans[iid])
        groups[iid] = CandidateGroup(iid, goals, plans, candidate_matrix(featurizer, goals, plans))
    return groups


# ---------------------------------------------------------------------------
# SFT


def sft_loss_and_grad(weights: np.ndarray, groups: Sequence[CandidateGroup]) -> tuple[float, np.ndarray]:
    """Mean over instructions of the cross-entropy to a uniform target over variants."""
    loss, grad = 0.0, np.zeros_like(weights)
    for g in groups:
        lp = log_probs(weights, g.feats)
        p = np.exp(lp)
        loss += -lp.mean()
        grad += p @ g.feats - g.feats.mean(axis=0)
    n = max(len(groups), 1)
    return loss / n, grad / n


def sft_fit(
    model: PlannerModel,
    groups: Mapping[int, CandidateGroup],
    epochs: int = 300,
    lr: float = 0.05,
) -> tuple[PlannerModel, list[float]]:
    """Full-batch gradient descent; returns the new model and the loss per epoch."""
    if any(len(g.plans) == 0 for g in groups.values()):
        raise ValueError("every instruction needs at least one candidate")
    gs = [groups[k] for k in sorted(groups)]
    out = model.copy()
    history: list[float] = []
    rises = 0
    for epoch in range(epochs):
        loss, grad = sft_loss_and_grad(out.weights, gs)
        if not math.isfinite(loss):
            raise TrainingError("SFT loss is not finite", {"epoch": epoch, "history": history})
        if history and loss > history[-1]:
            rises += 1
            if rises >= 3:
                raise TrainingError("SFT diverged: loss rose three epochs in a row",
                                    {"epoch": epoch, "history": history[-5:] + [loss], "lr": lr})
        else:
            rises = 0
        history.append(loss)
        out.weights = out.weights - lr * grad
    if history:
        history.append(sft_loss_and_grad(out.weights, gs)[0])
    return out, history


# ---------------------------------------------------------------------------
# DPO


@dataclass(frozen=True)
class PreferencePair:
    instruction_id: int
    winner_variant: int
    loser_variant: int
    sr_winner: float
    sr_loser: float

    def to_json(self) -> dict:
        return dict(self.__dict__)


def save_pairs(path, pairs: Sequence[PreferencePair]) -> None:
    with open(path, "w") as fh:
        for p in pairs:
            fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")


def load_pairs(path) -> list[PreferencePair]:
    with open(path) as fh:
        return [PreferencePair(**json.loads(line)) for line in fh if line.strip()]


def log_sigmoid(x: float) -> float:
    return -math.log1p(math.exp(-x)) if x >= 0 else x - math.log1p(math.exp(x))


def sigmoid(x: float) -> float:
    if x >= 0:
        return 1.0 / (1.0 + math.exp(-x))
    e = math.exp(x)
    return e / (1.0 + e)


def dpo_margin(weights: np.ndarray, group: CandidateGroup, pair: PreferencePair) -> float:
    """log pi(winner) - log pi(loser) within the instruction's candidate set."""
    lp = log_probs(weights, group.feats)
    return float(lp[group.row(pair.winner_variant)] - lp[group.row(pair.loser_variant)])


def dpo_loss_and_grad(
    weights: np.ndarray, group: CandidateGroup, pair: PreferencePair, beta: float
) -> tuple[float, np.ndarray]:
    # the log-partition cancels in the difference, leaving a score difference
    df = group.feats[group.row(pair.winner_variant)] - group.feats[group.row(pair.loser_variant)]
    z = beta * float(df @ weights)
    return -log_sigmoid(z), -beta * (1.0 - sigmoid(z)) * df


def dpo_update(
    model: PlannerModel,
    pairs: Sequence[PreferencePair],
    groups: Mapping[int, CandidateGroup],
    beta: float = 0.5,
    lr: float = 1e-2,
    epochs: int = 1,
) -> tuple[PlannerModel, list[float]]:
    """Per-pair SGD in the given pair order; returns the model and mean loss per epoch."""
    if not pairs:
        raise ValueError("no preference pairs")
    out = model.copy()
    history = []
    for epoch in range(epochs):
        total = 0.0
        for pair in pairs:
            loss, grad = dpo_loss_and_grad(out.weights, groups[pair.instruction_id], pair, beta)
            if not math.isfinite(loss) or not np.all(np.isfinite(grad)):
                raise TrainingError("DPO loss is not finite", {"epoch": epoch, "pair": pair.to_json()})
            total += loss
            out.weights = out.weights - lr * grad
        history.append(total / len(pairs))
    out.version = model.version + 1
    return out, history


# ---------------------------------------------------------------------------
# re-ranking


def reprioritize(
    model: PlannerModel,
    pool: Mapping[int, Sequence[ExpandedPlan]],
    goal_plans: Mapping[int, Sequence[int]],
    k: int,
) -> dict[int, list[ExpandedPlan]]:
    """Keep the ``k`` lowest-NLL variants per instruction, sorted by NLL."""
    if k < 1:
        raise ValueError("k must be at least 1")
    out = {}
    for iid, g in build_groups(model.featurizer, pool, goal_plans).items():
        scores = nll_all(model, g.feats)
        order = sorted(range(len(g.plans)), key=lambda i: (scores[i], g.plans[i].variant))
        out[iid] = [g.plans[i] for i in order[:k]]
    return out


def nll_table(
    model: PlannerModel,
    pool: Mapping[int, Sequence[ExpandedPlan]],
    goal_plans: Mapping[int, Sequence[int]],
) -> dict[tuple[int, int], float]:
    """NLL of every (instruction, variant) relative to its live candidates."""
    out = {}
    for iid, g in build_groups(model.featurizer, pool, goal_plans).items():
        for p, v in zip(g.plans, nll_all(model, g.feats)):
            out[(iid, p.variant)] = float(v)
    return out
