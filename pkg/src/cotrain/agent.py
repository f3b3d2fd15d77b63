"""Plan-conditioned PPO executor with skill curriculum.

The policy is a small fully connected network written directly in numpy:
two tanh layers shared by an actor head (logits over all actions, DONE
included) and a critic head. Its input is the symbolic observation followed
by a one-hot embedding of the active plan step.
"""

from __future__ import annotations

import hashlib
import json
import logging
import math
from collections import deque
from dataclasses import dataclass, field, replace
from typing import Callable, Iterable, Mapping, Sequence

import numpy as np

from . import env as E
from .ontology import ExpandedPlan, SubtaskBank
from .rng import XorShift64Star, derive_seed
from .tasks import Instruction, episode_step, finish, start_episode
from .techtree import N_ACTIONS, resolve

log = logging.getLogger(__name__)

PARAM_NAMES = ("W1", "b1", "W2", "b2", "Wa", "ba", "Wv", "bv")


class TrainingError(RuntimeError):
    def __init__(self, message: str, last_good: "PolicyParams | None" = None, diagnostics=None):
        super().__init__(message)
        self.last_good = last_good
        self.diagnostics = diagnostics or {}


class CurriculumError(RuntimeError):
    pass


# uniform: instruction, then variant, both uniform; score: variants weighted by
# PlanTask.weight (the planner's probability); frontier: plans bucketed by their
# unmastered skill, bucket drawn uniformly first (curriculum runs only)
PLAN_SAMPLING = ("uniform", "score", "frontier")


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    ppo_epochs: int = 4
    minibatches: int = 8
    entropy_coef: float = 0.01
    value_coef: float = 0.5
    learning_rate: float = 3e-4
    rollout_length: int = 128
    n_envs: int = 16
    max_grad_norm: float = 0.5
    adv_sd_floor: float = 1e-8
    hidden: int = 64
    # plan-step one-hot is scaled to the L2 norm of the 5x5 window one-hot
    embedding_scale: float = 5.0
    tau_mastery: float = 0.7
    skill_window: int = 100
    skill_min_episodes: int = 20
    curriculum_check_interval: int = 1
    plan_sampling: str = "uniform"
    world_pool: int = 1024
    log_interval: int = 10

    def __post_init__(self):
        positive = ("gamma", "gae_lambda", "clip_epsilon", "ppo_epochs", "minibatches",
                    "learning_rate", "rollout_length", "n_envs", "max_grad_norm", "hidden",
                    "skill_window", "curriculum_check_interval", "world_pool", "log_interval",
                    "embedding_scale")
        for name in positive:
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")
        if self.clip_epsilon >= 1:
            raise ValueError("clip_epsilon must be below 1")
        if self.entropy_coef < 0 or self.value_coef < 0:
            raise ValueError("loss coefficients must be non-negative")
        if self.plan_sampling not in PLAN_SAMPLING:
            raise ValueError(f"plan_sampling must be one of {PLAN_SAMPLING}")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


# Named alternatives: the hyperparameter table's values and the PPO-T values
# quoted with the main experiments.
PPO_PROFILES: dict[str, dict] = {
    "default": {},
    "table": {"learning_rate": 2e-4, "clip_epsilon": 0.2},
    "ppo_t": {"learning_rate": 1e-3, "clip_epsilon": 0.02},
    "wide": {"hidden": 512},
}


def ppo_profile(name: str, **overrides) -> PPOConfig:
    return PPOConfig(**{**PPO_PROFILES[name], **overrides})


# ---------------------------------------------------------------------------
# network


@dataclass
class PolicyParams:
    arrays: dict[str, np.ndarray]
    obs_size: int
    emb_size: int
    version: int = 0

    @property
    def hidden(self) -> int:
        return self.arrays["W1"].shape[1]

    @property
    def input_size(self) -> int:
        return self.obs_size + self.emb_size

    def copy(self) -> "PolicyParams":
        return PolicyParams({k: v.copy() for k, v in self.arrays.items()},
                            self.obs_size, self.emb_size, self.version)

    def flat(self) -> np.ndarray:
        return np.concatenate([self.arrays[k].ravel() for k in PARAM_NAMES])

    def set_flat(self, vec: np.ndarray) -> None:
        i = 0
        for k in PARAM_NAMES:
            a = self.arrays[k]
            self.arrays[k] = vec[i:i + a.size].reshape(a.shape).copy()
            i += a.size

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(a)) for a in self.arrays.values())

    def schema_hash(self) -> str:
        desc = f"mlp-tanh2;in={self.obs_size}+{self.emb_size};h={self.hidden};a={N_ACTIONS}"
        return hashlib.sha256(desc.encode()).hexdigest()[:16]

    def to_json(self) -> dict:
        return {
            "version": self.version,
            "schema_hash": self.schema_hash(),
            "obs_size": self.obs_size,
            "emb_size": self.emb_size,
            "arrays": {k: {"shape": list(self.arrays[k].shape),
                           "data": [float(x) for x in self.arrays[k].ravel()]}
                       for k in PARAM_NAMES},
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "PolicyParams":
        arrays = {k: np.asarray(v["data"], dtype=np.float64).reshape(v["shape"])
                  for k, v in doc["arrays"].items()}
        p = cls(arrays, doc["obs_size"], doc["emb_size"], doc["version"])
        if p.schema_hash() != doc["schema_hash"]:
            raise ValueError("policy checkpoint schema does not match")
        return p


def save_policy(path, params: PolicyParams) -> None:
    with open(path, "w") as fh:
        json.dump(params.to_json(), fh, sort_keys=True)


def load_policy(path) -> PolicyParams:
    with open(path) as fh:
        return PolicyParams.from_json(json.load(fh))


def _orthogonal(rng: np.random.Generator, rows: int, cols: int, gain: float) -> np.ndarray:
    a = rng.normal(size=(max(rows, cols), min(rows, cols)))
    q, r = np.linalg.qr(a)
    q *= np.sign(np.diag(r))
    if rows < cols:
        q = q.T
    return gain * q[:rows, :cols]


def init_policy(obs_size: int, emb_size: int, hidden: int = 64, seed: int = 0,
                *, zero_heads: bool = False) -> PolicyParams:
    rng = np.random.default_rng(derive_seed(seed, "policy-init"))
    n_in = obs_size + emb_size
    arrays = {
        "W1": _orthogonal(rng, n_in, hidden, math.sqrt(2)),
        "b1": np.zeros(hidden),
        "W2": _orthogonal(rng, hidden, hidden, math.sqrt(2)),
        "b2": np.zeros(hidden),
        "Wa": _orthogonal(rng, hidden, N_ACTIONS, 0.01),
        "ba": np.zeros(N_ACTIONS),
        "Wv": _orthogonal(rng, hidden, 1, 1.0),
        "bv": np.zeros(1),
    }
    if zero_heads:
        for k in ("Wa", "ba", "Wv", "bv"):
            arrays[k][:] = 0.0
    return PolicyParams(arrays, obs_size, emb_size)


def forward(params: PolicyParams, x: np.ndarray):
    """Batched forward pass; returns (logits, values, cache)."""
    p = params.arrays
    h1 = np.tanh(x @ p["W1"] + p["b1"])
    h2 = np.tanh(h1 @ p["W2"] + p["b2"])
    logits = h2 @ p["Wa"] + p["ba"]
    values = (h2 @ p["Wv"] + p["bv"])[:, 0]
    return logits, values, (x, h1, h2)


def backward(params: PolicyParams, cache, dlogits: np.ndarray, dvalues: np.ndarray) -> dict[str, np.ndarray]:
    p = params.arrays
    x, h1, h2 = cache
    g = {
        "Wa": h2.T @ dlogits,
        "ba": dlogits.sum(0),
        "Wv": h2.T @ dvalues[:, None],
        "bv": np.array([dvalues.sum()]),
    }
    dh2 = dlogits @ p["Wa"].T + dvalues[:, None] @ p["Wv"].T
    da2 = dh2 * (1.0 - h2 * h2)
    g["W2"] = h1.T @ da2
    g["b2"] = da2.sum(0)
    da1 = (da2 @ p["W2"].T) * (1.0 - h1 * h1)
    g["W1"] = x.T @ da1
    g["b1"] = da1.sum(0)
    return g


def log_softmax(z: np.ndarray) -> np.ndarray:
    m = z.max(axis=-1, keepdims=True)
    s = z - m
    return s - np.log(np.exp(s).sum(axis=-1, keepdims=True))


def policy_forward(params: PolicyParams, obs: np.ndarray, plan_emb: np.ndarray) -> tuple[np.ndarray, float]:
    """Action distribution and value for a single observation."""
    obs = np.asarray(obs, dtype=np.float64)
    plan_emb = np.asarray(plan_emb, dtype=np.float64)
    if obs.shape != (params.obs_size,) or plan_emb.shape != (params.emb_size,):
        raise E.ContractViolation(
            f"expected obs {params.obs_size} and embedding {params.emb_size}, "
            f"got {obs.shape} and {plan_emb.shape}")
    logits, values, _ = forward(params, np.concatenate([obs, plan_emb])[None, :])
    return np.exp(log_softmax(logits[0])), float(values[0])


# ---------------------------------------------------------------------------
# advantages and the PPO objective


def compute_gae(rewards, values, terminals, gamma: float, lam: float, last_value=0.0):
    """Recursive GAE over the time axis (axis 0); bootstraps from ``last_value``."""
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminals = np.asarray(terminals, dtype=np.float64)
    adv = np.zeros_like(values)
    next_adv = np.zeros_like(values[0]) if values.ndim > 1 else 0.0
    next_value = np.broadcast_to(np.asarray(last_value, dtype=np.float64), values.shape[1:])
    for t in range(len(rewards) - 1, -1, -1):
        live = 1.0 - terminals[t]
        delta = rewards[t] + gamma * next_value * live - values[t]
        next_adv = delta + gamma * lam * live * next_adv
        adv[t] = next_adv
        next_value = values[t]
    return adv, adv + values


def normalize_advantages(adv: np.ndarray, floor: float = 1e-8) -> np.ndarray:
    sd = adv.std()
    return (adv - adv.mean()) / max(sd, floor)


def clipped_surrogate(ratio, adv, eps: float):
    return np.minimum(ratio * adv, np.clip(ratio, 1 - eps, 1 + eps) * adv)


@dataclass
class Batch:
    x: np.ndarray
    actions: np.ndarray
    old_logp: np.ndarray
    advantages: np.ndarray
    returns: np.ndarray

    def __len__(self) -> int:
        return len(self.actions)

    def take(self, idx) -> "Batch":
        return Batch(self.x[idx], self.actions[idx], self.old_logp[idx],
                     self.advantages[idx], self.returns[idx])


def ppo_objective(params: PolicyParams, batch: Batch, cfg: PPOConfig):
    """Loss to minimise and its gradient; advantages are used as given."""
    n = len(batch)
    logits, values, cache = forward(params, batch.x)
    logp_all = log_softmax(logits)
    probs = np.exp(logp_all)
    rows = np.arange(n)
    logp = logp_all[rows, batch.actions]
    ratio = np.exp(logp - batch.old_logp)
    adv = batch.advantages
    eps = cfg.clip_epsilon
    surr = clipped_surrogate(ratio, adv, eps)
    entropy = -(probs * logp_all).sum(1)
    verr = values - batch.returns
    pg_loss = -surr.mean()
    v_loss = 0.5 * (verr ** 2).mean()
    ent = entropy.mean()
    loss = pg_loss + cfg.value_coef * v_loss - cfg.entropy_coef * ent

    unclipped = ratio * adv <= np.clip(ratio, 1 - eps, 1 + eps) * adv
    coef = -(adv * ratio * unclipped) / n
    onehot = np.zeros_like(probs)
    onehot[rows, batch.actions] = 1.0
    dlogits = coef[:, None] * (onehot - probs)
    dlogits += (cfg.entropy_coef / n) * probs * (logp_all + entropy[:, None])
    dvalues = cfg.value_coef * verr / n
    grads = backward(params, cache, dlogits, dvalues)
    stats = {
        "loss": float(loss),
        "pg_loss": float(pg_loss),
        "v_loss": float(v_loss),
        "entropy": float(ent),
        "approx_kl": float(((ratio - 1) - np.log(ratio)).mean()),
        "clip_frac": float((np.abs(ratio - 1) > eps).mean()),
    }
    return float(loss), grads, stats


def clip_grad_norm(grads: dict[str, np.ndarray], max_norm: float) -> float:
    norm = math.sqrt(sum(float((g * g).sum()) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


class Adam:
    def __init__(self, lr: float, beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-5):
        self.lr, self.beta1, self.beta2, self.eps = lr, beta1, beta2, eps
        self.t = 0
        self.m: dict[str, np.ndarray] = {}
        self.v: dict[str, np.ndarray] = {}

    def step(self, params: PolicyParams, grads: Mapping[str, np.ndarray]) -> None:
        self.t += 1
        c1 = 1 - self.beta1 ** self.t
        c2 = 1 - self.beta2 ** self.t
        for k in PARAM_NAMES:
            g = grads[k]
            m = self.m.get(k)
            if m is None:
                m = self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            v = self.v[k]
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            params.arrays[k] = params.arrays[k] - self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def ppo_update(params: PolicyParams, batch: Batch, cfg: PPOConfig,
               rng: np.random.Generator, opt: Adam | None = None) -> tuple[PolicyParams, dict]:
    if len(batch) == 0:
        raise ValueError("empty rollout buffer")
    opt = opt or Adam(cfg.learning_rate)
    last_good = params.copy()
    out = params.copy()
    n = len(batch)
    mb = max(n // cfg.minibatches, 1)
    sums: dict[str, float] = {}
    count = 0
    for epoch in range(cfg.ppo_epochs):
        perm = rng.permutation(n)
        for k in range(0, n - mb + 1, mb):
            sub = batch.take(perm[k:k + mb])
            sub.advantages = normalize_advantages(sub.advantages, cfg.adv_sd_floor)
            loss, grads, stats = ppo_objective(out, sub, cfg)
            if not math.isfinite(loss):
                raise TrainingError("PPO loss is not finite", last_good, {"epoch": epoch})
            stats["grad_norm"] = clip_grad_norm(grads, cfg.max_grad_norm)
            opt.step(out, grads)
            for key, val in stats.items():
                sums[key] = sums.get(key, 0.0) + val
            count += 1
    if not out.is_finite():
        raise TrainingError("parameters became non-finite", last_good)
    out.version = params.version + 1
    return out, {k: v / count for k, v in sums.items()}


# ---------------------------------------------------------------------------
# training tasks and the curriculum


@dataclass(frozen=True)
class TrainMode:
    curriculum: bool = True
    no_plan: bool = False
    auto_done: bool = False

    def to_dict(self) -> dict:
        return dict(self.__dict__)


@dataclass(frozen=True)
class PlanTask:
    """One sampleable unit: an instruction paired with one plan variant."""

    instruction: Instruction
    variant: int
    steps: tuple[int, ...]
    skills: frozenset[int]
    targets: tuple[int | None, ...]
    embedding: np.ndarray | None = field(default=None, compare=False)
    weight: float = field(default=1.0, compare=False)

    @property
    def key(self) -> tuple[int, int]:
        return (self.instruction.id, self.variant)


def make_tasks(
    instructions: Sequence[Instruction],
    pool: Mapping[int, Sequence[ExpandedPlan]],
    bank: SubtaskBank,
    goal_plans: Mapping[int, Sequence[int]],
    *,
    no_plan: bool = False,
) -> list[PlanTask]:
    """Tasks for every instruction that has plans in ``pool``.

    Without plans the agent sees a multi-hot of the instruction's goals and
    must press DONE once, when it believes the whole instruction is done.
    """
    def target(s: int) -> int | None:
        a = resolve(bank[s])
        return None if a is None else int(a)

    tasks = []
    emb_size = len(bank) + 1
    for ins in sorted(instructions, key=lambda i: i.id):
        if ins.id not in pool:
            continue
        if no_plan:
            goals = tuple(goal_plans[ins.id])
            emb = np.zeros(emb_size)
            emb[list(goals)] = 1.0
            tasks.append(PlanTask(ins, 0, (goals[-1],), frozenset(goals),
                                  (target(goals[-1]),), emb))
            continue
        for p in pool[ins.id]:
            tasks.append(PlanTask(ins, p.variant, p.steps, frozenset(p.steps),
                                  tuple(target(s) for s in p.steps)))
    return tasks


def weight_tasks(tasks: Sequence[PlanTask], weights: Mapping[tuple[int, int], float]) -> list[PlanTask]:
    """Copies of ``tasks`` carrying sampling weights; missing keys keep weight 1."""
    out = []
    for t in tasks:
        w = float(weights.get(t.key, 1.0))
        if not (w > 0 and math.isfinite(w)):
            raise ValueError(f"sampling weight for {t.key} must be positive and finite")
        out.append(replace(t, weight=w))
    return out


def plan_embedding(task: PlanTask, pointer: int, emb_size: int, scale: float = 1.0) -> np.ndarray:
    if task.embedding is not None:
        return task.embedding * scale
    e = np.zeros(emb_size)
    e[task.steps[pointer] if pointer < len(task.steps) else emb_size - 1] = scale
    return e


@dataclass
class CurriculumState:
    mastered: set[int] = field(default_factory=set)
    history: dict[int, deque] = field(default_factory=dict)
    active: list[tuple[int, int]] = field(default_factory=list)
    enabled: bool = True
    window: int = 100

    def copy(self) -> "CurriculumState":
        return CurriculumState(set(self.mastered),
                               {s: deque(h, maxlen=self.window) for s, h in self.history.items()},
                               list(self.active), self.enabled, self.window)

    def success_rate(self, skill: int, min_episodes: int = 1) -> float | None:
        h = self.history.get(skill)
        if not h or len(h) < min_episodes:
            return None
        return sum(h) / len(h)

    def to_json(self) -> dict:
        return {
            "mastered": sorted(self.mastered),
            "history": {str(s): list(h) for s, h in sorted(self.history.items())},
            "active": [list(k) for k in self.active],
            "enabled": self.enabled,
            "window": self.window,
        }

    @classmethod
    def from_json(cls, doc: Mapping) -> "CurriculumState":
        w = doc["window"]
        return cls(set(doc["mastered"]),
                   {int(s): deque(h, maxlen=w) for s, h in doc["history"].items()},
                   [tuple(k) for k in doc["active"]], doc["enabled"], w)


def active_set(tasks: Iterable[PlanTask], mastered: set[int], enabled: bool) -> list[tuple[int, int]]:
    if not enabled:
        return [t.key for t in tasks]
    return [t.key for t in tasks if len(t.skills - mastered) <= 1]


def init_curriculum(tasks: Sequence[PlanTask], enabled: bool = True, window: int = 100) -> CurriculumState:
    state = CurriculumState(enabled=enabled, window=window)
    state.active = active_set(tasks, set(), enabled)
    if not state.active:
        raise CurriculumError("no single-skill plans in the pool; the curriculum cannot start")
    return state


def curriculum_update(
    state: CurriculumState,
    outcomes: Iterable[tuple[frozenset[int], bool]],
    tasks: Sequence[PlanTask],
    tau_mastery: float = 0.7,
    min_episodes: int = 20,
) -> CurriculumState:
    """Fold episode outcomes into per-skill windows, grow the mastered set, refresh the pool."""
    new = state.copy()
    for skills, success in outcomes:
        for s in skills:
            h = new.history.get(s)
            if h is None:
                h = new.history[s] = deque(maxlen=new.window)
            h.append(1 if success else 0)
    for s in sorted(new.history):
        sr = new.success_rate(s, min_episodes)
        if sr is not None and sr >= tau_mastery:
            new.mastered.add(s)
    new.active = active_set(tasks, new.mastered, new.enabled)
    return new


# ---------------------------------------------------------------------------
# rollouts


def world_seeds(seed: int, n: int, stream: str = "train-world") -> list[int]:
    return [derive_seed(seed, stream, i) for i in range(n)]


class _Slot:
    __slots__ = ("task", "eps", "obs")

    def __init__(self, task, eps, obs):
        self.task, self.eps, self.obs = task, eps, obs


def _start(task: PlanTask, env_config: E.EnvConfig, world: int, auto_done: bool) -> _Slot:
    eps, obs = start_episode(env_config, task.instruction, task.steps, world,
                             targets=task.targets, auto_done=auto_done, plan_id=task.variant)
    return _Slot(task, eps, obs)


def _inputs(slots: Sequence[_Slot], params: PolicyParams, scale: float) -> np.ndarray:
    x = np.empty((len(slots), params.input_size))
    o = params.obs_size
    for i, s in enumerate(slots):
        x[i, :o] = s.obs
        x[i, o:] = plan_embedding(s.task, s.eps.pointer, params.emb_size, scale)
    return x


def _advance(slot: _Slot, action: int) -> bool:
    """Step one episode; returns True once it has terminated."""
    episode_step(slot.eps, action)
    if slot.eps.terminated:
        return True
    if action != E._DONE:
        slot.obs = E.observe(slot.eps.env_state)
    return False


def run_episodes(
    params: PolicyParams,
    jobs: Sequence[tuple[PlanTask, int]],
    env_config: E.EnvConfig,
    *,
    auto_done: bool = False,
    greedy: bool = True,
    seed: int = 0,
    batch_size: int = 256,
    embedding_scale: float = PPOConfig.embedding_scale,
):
    """Run each (task, world seed) job to termination; outcomes in job order."""
    rng = np.random.default_rng(derive_seed(seed, "eval-actions"))
    outcomes = [None] * len(jobs)
    for lo in range(0, len(jobs), batch_size):
        live = [(lo + i, _start(t, env_config, w, auto_done))
                for i, (t, w) in enumerate(jobs[lo:lo + batch_size])]
        while live:
            logits, _, _ = forward(params, _inputs([s for _, s in live], params, embedding_scale))
            if greedy:
                actions = logits.argmax(1)
            else:
                actions = _sample(np.exp(log_softmax(logits)), rng)
            keep = []
            for (j, slot), a in zip(live, actions):
                if _advance(slot, int(a)):
                    outcomes[j] = finish(slot.eps)
                else:
                    keep.append((j, slot))
            live = keep
    return outcomes


def _sample(probs: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    u = rng.random(len(probs))
    return np.minimum((probs.cumsum(1) < u[:, None]).sum(1), probs.shape[1] - 1)


def _weighted_index(weights: Sequence[float], u: float) -> int:
    acc, target = 0.0, u * sum(weights)
    for i, w in enumerate(weights):
        acc += w
        if target < acc:
            return i
    return len(weights) - 1


def plan_buckets(
    active: Sequence[PlanTask], mastered: set[int], balance: bool
) -> list[list[list[PlanTask]]]:
    """Sampling layout: buckets of instructions, each a list of its variants.

    With ``balance`` the buckets are keyed by the plan's unmastered skill
    (plans with none share one bucket); otherwise there is a single bucket.
    """
    g: dict[int, dict[int, list[PlanTask]]] = {}
    for t in active:
        b = min(t.skills - mastered, default=-1) if balance else -1
        g.setdefault(b, {}).setdefault(t.instruction.id, []).append(t)
    return [[ins[i] for i in sorted(ins)] for _, ins in sorted(g.items())]


@dataclass
class TrainingResult:
    params: PolicyParams
    log: list[dict]
    curriculum: CurriculumState
    steps: int


def run_training(
    params: PolicyParams,
    tasks: Sequence[PlanTask],
    env_config: E.EnvConfig,
    cfg: PPOConfig,
    budget_steps: int,
    mode: TrainMode = TrainMode(),
    seed: int = 0,
    curriculum: CurriculumState | None = None,
    on_log: Callable[[dict], None] | None = None,
) -> TrainingResult:
    """PPO on plans drawn from the curriculum's active pool.

    The budget is rounded up to whole rollouts of ``n_envs * rollout_length``
    steps. Sampling picks an instruction uniformly among those with an active
    variant, then one of its active variants uniformly. ``cfg.plan_sampling``
    selects the alternatives: "score" draws the variant in proportion to
    ``PlanTask.weight``; "frontier" (curriculum on) first buckets active plans
    by their one unmastered skill, or none, and draws a bucket uniformly so a
    new skill is not starved by the growing set of plans over mastered skills.
    """
    if curriculum is None:
        curriculum = init_curriculum(tasks, mode.curriculum, cfg.skill_window)
    elif not curriculum.active:
        raise CurriculumError("the curriculum has no active plans")
    by_key = {t.key: t for t in tasks}
    missing = [k for k in curriculum.active if k not in by_key]
    if missing:
        raise CurriculumError(f"active plans missing from the task list: {missing[:5]}")
    n, T = cfg.n_envs, cfg.rollout_length
    n_updates = -(-max(budget_steps, 0) // (n * T))
    log_records: list[dict] = []
    if n_updates == 0:
        return TrainingResult(params, log_records, curriculum, 0)

    sampler = XorShift64Star(derive_seed(seed, "plan-sampler"))
    act_rng = np.random.default_rng(derive_seed(seed, "actions"))
    mb_rng = np.random.default_rng(derive_seed(seed, "minibatches"))
    worlds = world_seeds(seed, cfg.world_pool)
    opt = Adam(cfg.learning_rate)

    balance = cfg.plan_sampling == "frontier" and curriculum.enabled
    weighted = cfg.plan_sampling == "score"

    def grouped(active):
        return plan_buckets([by_key[k] for k in active], curriculum.mastered, balance)

    groups = grouped(curriculum.active)

    def new_slot() -> _Slot:
        bucket = groups[sampler.below(len(groups))] if len(groups) > 1 else groups[0]
        variants = bucket[sampler.below(len(bucket))]
        if weighted:
            task = variants[_weighted_index([t.weight for t in variants], sampler.uniform())]
        else:
            task = variants[sampler.below(len(variants))]
        return _start(task, env_config, worlds[sampler.below(len(worlds))], mode.auto_done)

    slots = [new_slot() for _ in range(n)]
    recent: dict[str, deque] = {}
    pending: list[tuple[frozenset[int], bool]] = []
    D = params.input_size
    xs = np.empty((T, n, D))
    acts = np.empty((T, n), dtype=np.int64)
    logps = np.empty((T, n))
    vals = np.empty((T, n))
    rews = np.zeros((T, n))
    terms = np.zeros((T, n))
    steps = 0
    episodes = 0
    for update in range(1, n_updates + 1):
        for t in range(T):
            x = _inputs(slots, params, cfg.embedding_scale)
            logits, values, _ = forward(params, x)
            lp = log_softmax(logits)
            a = _sample(np.exp(lp), act_rng)
            xs[t], acts[t], vals[t] = x, a, values
            logps[t] = lp[np.arange(n), a]
            rews[t] = 0.0
            terms[t] = 0.0
            for i in range(n):
                slot = slots[i]
                if _advance(slot, int(a[i])):
                    out = finish(slot.eps)
                    rews[t, i] = 1.0 if out.success else 0.0
                    terms[t, i] = 1.0
                    pending.append((slot.task.skills, out.success))
                    split = slot.task.instruction.split.value
                    recent.setdefault(split, deque(maxlen=200)).append(out.success)
                    episodes += 1
                    slots[i] = new_slot()
        steps += n * T
        _, last_values, _ = forward(params, _inputs(slots, params, cfg.embedding_scale))
        adv, ret = compute_gae(rews, vals, terms, cfg.gamma, cfg.gae_lambda, last_values)
        batch = Batch(xs.reshape(-1, D).copy(), acts.ravel().copy(), logps.ravel().copy(),
                      adv.ravel(), ret.ravel())
        params, stats = ppo_update(params, batch, cfg, mb_rng, opt)
        if update % cfg.curriculum_check_interval == 0 and pending:
            before = len(curriculum.mastered)
            curriculum = curriculum_update(curriculum, pending, tasks, cfg.tau_mastery,
                                           cfg.skill_min_episodes)
            pending = []
            if len(curriculum.mastered) != before:
                groups = grouped(curriculum.active)
        if update % cfg.log_interval == 0 or update == n_updates:
            rec = {
                "update": update,
                "step": steps,
                "episodes": episodes,
                "mastered_count": len(curriculum.mastered),
                "mastered": sorted(curriculum.mastered),
                "active_plans": len(curriculum.active),
                "sr_by_split": {k: sum(v) / len(v) for k, v in sorted(recent.items())},
                **stats,
            }
            log_records.append(rec)
            if on_log is not None:
                on_log(rec)
    return TrainingResult(params, log_records, curriculum, steps)
