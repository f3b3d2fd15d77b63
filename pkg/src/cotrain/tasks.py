"""Instructions, the plan-conditioned episode driver and strict evaluation.

An episode follows a plan: a sequence of subtask ids with a pointer to the
active step. ``DONE`` advances the pointer without checking anything; the
only judgement happens at the end, in :func:`evaluate_strict`.
"""

from __future__ import annotations

import itertools
import json
import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Mapping, Sequence

import numpy as np

from . import env as E
from .rng import XorShift64Star, derive_seed
from .techtree import CANONICAL, Achievement, Action, required_closure, resolve

log = logging.getLogger(__name__)

DONE = int(Action.DONE)


class Split(str, Enum):
    ATOMIC = "Atomic"
    COMBO = "Combo"
    PARAPHRASE = "Paraphrase"
    NEW_OBJECTS = "NewObjects"


TRAIN_SPLITS = (Split.ATOMIC, Split.COMBO)


@dataclass(frozen=True)
class Subtask:
    id: int
    canonical: str


SUBTASKS: tuple[Subtask, ...] = tuple(Subtask(int(a), CANONICAL[a]) for a in Achievement)


@dataclass(frozen=True)
class Instruction:
    id: int
    surface: str
    goals: tuple[int, ...]
    split: Split
    paraphrases: tuple[str, ...] = ()

    def to_json(self) -> dict:
        return {
            "id": self.id,
            "surface": self.surface,
            "goals": [CANONICAL[Achievement(g)] for g in self.goals],
            "split": self.split.value,
            "paraphrases": list(self.paraphrases),
        }

    @classmethod
    def from_json(cls, d: Mapping) -> "Instruction":
        goals = []
        for g in d["goals"]:
            a = resolve(g)
            if a is None:
                raise ValueError(f"unknown subtask {g!r}")
            goals.append(int(a))
        return cls(int(d["id"]), d["surface"], tuple(goals), Split(d["split"]),
                   tuple(d.get("paraphrases", ())))


class GenerationError(ValueError):
    pass


# ---------------------------------------------------------------------------
# dataset generation

# per achievement: surfaces used in training, surfaces held out for the Paraphrase split
PHRASES: dict[Achievement, tuple[tuple[str, ...], tuple[str, ...]]] = {
    Achievement.GATHER_WOOD: (("collect wood", "gather wood", "chop a tree"),
                              ("harvest some timber", "fell a tree for logs")),
    Achievement.PLACE_TABLE: (("place a table", "build a crafting table", "set up a workbench"),
                              ("erect a workbench", "assemble a crafting bench")),
    Achievement.CRAFT_WOODEN_PICKAXE: (("craft a wooden pickaxe", "make a pickaxe from wood",
                                        "create a wood pickaxe"),
                                       ("carve a timber pick", "whittle a wooden pick")),
    Achievement.CRAFT_WOODEN_SWORD: (("craft a wooden sword", "make a sword from wood",
                                      "create a wood sword"),
                                     ("carve a timber blade", "whittle a wooden blade")),
    Achievement.GATHER_STONE: (("collect stone", "mine some stone", "gather stone"),
                               ("quarry a rock", "dig out cobblestone")),
    Achievement.PLACE_STONE: (("place a stone", "put down a stone block", "set a stone"),
                              ("lay a rock on the ground", "deposit a cobble block")),
    Achievement.CRAFT_STONE_PICKAXE: (("craft a stone pickaxe", "make a pickaxe from stone",
                                       "create a stone pickaxe"),
                                      ("forge a stone pickaxe", "fashion a rock pick")),
    Achievement.CRAFT_STONE_SWORD: (("craft a stone sword", "make a sword from stone",
                                     "create a stone sword"),
                                    ("forge a stone blade", "fashion a rock blade")),
    Achievement.PLACE_FURNACE: (("craft a furnace", "place a furnace", "build a furnace"),
                                ("forge a furnace", "erect a smelter")),
    Achievement.GATHER_COAL: (("collect coal", "mine coal", "gather coal"),
                              ("dig up some coal", "extract black ore")),
    Achievement.GATHER_IRON: (("collect iron", "mine iron", "gather iron"),
                              ("dig up some iron ore", "extract metal ore")),
    Achievement.CRAFT_IRON_PICKAXE: (("craft an iron pickaxe", "make a pickaxe from iron",
                                      "create an iron pickaxe"),
                                     ("forge an iron pick", "fashion a metal pickaxe")),
    Achievement.DRINK_WATER: (("drink water", "take a drink", "drink from the lake"),
                              ("quench your thirst", "sip some water")),
    Achievement.EAT_BEEF: (("eat beef", "consume beef", "eat a cow"),
                           ("eat steak", "devour cow meat")),
}
TRAIN_JOINERS = (" and then ", ", then ")
HELDOUT_JOINERS = (", followed by ", ", after that ")


@dataclass(frozen=True)
class GenConfig:
    n_combo: int = 46
    n_paraphrase: int = 30
    n_new_objects: int = 30
    n_heldout_pairs: int = 12
    max_combo_len: int = 3
    pair_fraction: float = 0.6

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def combo_is_satisfiable(goals: Sequence[int]) -> bool:
    """Ordered goals are satisfiable iff no later goal is needed by an earlier one."""
    if len(set(goals)) != len(goals):
        return False
    for i, gi in enumerate(goals):
        for gj in goals[i + 1:]:
            if gj in required_closure([gi]):
                return False
    return True


def _surface(goals: Sequence[int], rng: XorShift64Star, heldout: bool) -> str:
    which = 1 if heldout else 0
    parts = [rng.choice(PHRASES[Achievement(g)][which]) for g in goals]
    joiners = HELDOUT_JOINERS if heldout else TRAIN_JOINERS
    text = parts[0]
    for p in parts[1:]:
        text += rng.choice(joiners) + p
    return text[0].upper() + text[1:] + "."


def _distinct_surfaces(goals, rng, heldout, k, taken: set[str], attempts: int = 64) -> list[str]:
    out: list[str] = []
    for _ in range(attempts):
        if len(out) == k:
            break
        s = _surface(goals, rng, heldout)
        if s not in taken and s not in out:
            out.append(s)
    return out


def generate_dataset(gen: GenConfig = GenConfig(), seed: int = 0) -> list[Instruction]:
    """Atomic, Combo, Paraphrase and NewObjects instructions, deterministic in ``seed``."""
    rng = XorShift64Star(derive_seed(seed, "dataset"))
    achievements = [int(a) for a in Achievement]

    ordered = [c for k in range(2, gen.max_combo_len + 1)
               for c in itertools.permutations(achievements, k) if combo_is_satisfiable(c)]
    pairs = sorted({frozenset(c) for c in ordered if len(c) == 2}, key=lambda s: sorted(s))
    if gen.n_heldout_pairs > len(pairs):
        raise GenerationError("more held-out pairs requested than exist")
    rng.shuffle(pairs)
    heldout = set(pairs[: gen.n_heldout_pairs])

    def touches_heldout(c) -> bool:
        return any(frozenset(p) in heldout for p in itertools.combinations(c, 2))

    train_pool = [c for c in ordered if not touches_heldout(c)]
    if gen.n_combo > len(train_pool):
        raise GenerationError(f"n_combo={gen.n_combo} exceeds {len(train_pool)} available combos")
    short = [c for c in train_pool if len(c) == 2]
    long = [c for c in train_pool if len(c) > 2]
    rng.shuffle(short)
    rng.shuffle(long)
    n_short = min(len(short), round(gen.n_combo * gen.pair_fraction))
    if gen.n_combo - n_short > len(long):
        n_short = gen.n_combo - len(long)
    combos = short[:n_short] + long[: gen.n_combo - n_short]
    rng.shuffle(combos)

    instructions: list[Instruction] = []
    train_surfaces: set[str] = set()

    def add(goals, split, surfaces):
        instructions.append(Instruction(len(instructions), surfaces[0], tuple(goals), split,
                                        tuple(surfaces[1:])))

    for a in achievements:
        surfaces = _distinct_surfaces([a], rng, False, 2, train_surfaces)
        train_surfaces.update(surfaces)
        add([a], Split.ATOMIC, surfaces)
    for c in combos:
        surfaces = _distinct_surfaces(c, rng, False, 2, train_surfaces)
        if len(surfaces) < 2:
            raise GenerationError(f"could not find two training surfaces for {c}")
        train_surfaces.update(surfaces)
        add(c, Split.COMBO, surfaces)

    test_surfaces: set[str] = set(train_surfaces)
    para_sources = combos * (1 + gen.n_paraphrase // max(1, len(combos)))
    made = 0
    for c in para_sources:
        if made == gen.n_paraphrase:
            break
        s = _distinct_surfaces(c, rng, True, 1, test_surfaces)
        if not s:
            continue
        test_surfaces.update(s)
        add(c, Split.PARAPHRASE, s)
        made += 1
    if made < gen.n_paraphrase:
        raise GenerationError(f"only {made} paraphrase instructions could be generated")

    new_pool = [c for c in ordered if len(c) == 2 and frozenset(c) in heldout]
    if not new_pool and gen.n_new_objects:
        raise GenerationError("no held-out combinations available for NewObjects")
    rng.shuffle(new_pool)
    made = 0
    for c in itertools.islice(itertools.cycle(new_pool), 8 * max(1, gen.n_new_objects)):
        if made == gen.n_new_objects:
            break
        s = _distinct_surfaces(c, rng, rng.chance(0.5), 1, test_surfaces)
        if not s:
            continue
        test_surfaces.update(s)
        add(c, Split.NEW_OBJECTS, s)
        made += 1
    if made < gen.n_new_objects:
        raise GenerationError(f"only {made} NewObjects instructions could be generated")

    check_split_hygiene(instructions)
    return instructions


def check_split_hygiene(instructions: Sequence[Instruction]) -> None:
    train = [i for i in instructions if i.split in TRAIN_SPLITS]
    train_sets = [frozenset(i.goals) for i in train]
    train_goal_seqs = {i.goals for i in train if i.split == Split.COMBO}
    train_surfaces = {s for i in train for s in (i.surface, *i.paraphrases)}
    for ins in instructions:
        if ins.split == Split.ATOMIC and len(ins.goals) != 1:
            raise GenerationError(f"atomic instruction {ins.id} has {len(ins.goals)} goals")
        if ins.split == Split.NEW_OBJECTS:
            gs = frozenset(ins.goals)
            if any(gs <= t for t in train_sets):
                raise GenerationError(f"NewObjects instruction {ins.id} co-occurs in training")
        if ins.split == Split.PARAPHRASE:
            if ins.goals not in train_goal_seqs:
                raise GenerationError(f"paraphrase {ins.id} has no Combo counterpart")
            if ins.surface in train_surfaces:
                raise GenerationError(f"paraphrase {ins.id} reuses a training surface")


def save_dataset(path, instructions: Iterable[Instruction]) -> None:
    with open(path, "w") as fh:
        for ins in instructions:
            fh.write(json.dumps(ins.to_json(), sort_keys=True) + "\n")


def load_dataset(path) -> list[Instruction]:
    with open(path) as fh:
        return [Instruction.from_json(json.loads(line)) for line in fh if line.strip()]


# ---------------------------------------------------------------------------
# episodes


@dataclass
class PlanEpisodeState:
    env_state: E.WorldState
    plan: tuple[int, ...]
    instruction: Instruction
    targets: tuple[int | None, ...] = ()  # ground-truth achievement per step (auto-DONE)
    pointer: int = 0
    achievements: list[E.AchievementEvent] = field(default_factory=list)
    strict: bool = True
    auto_done: bool = False
    ordered: bool = True
    closure: frozenset[int] = frozenset()
    terminated: bool = False
    exhausted_by_done: bool = False
    seed: int = 0
    plan_id: int = 0

    @property
    def exhausted(self) -> bool:
        return self.pointer >= len(self.plan)


@dataclass(frozen=True)
class EpisodeOutcome:
    success: bool
    achieved: frozenset[int]
    steps_used: int
    plan_id: int
    instruction_id: int
    seed: int


def start_episode(
    config: E.EnvConfig,
    instruction: Instruction,
    plan: Sequence[int],
    seed: int,
    *,
    targets: Sequence[int | None] | None = None,
    strict: bool = True,
    auto_done: bool = False,
    ordered: bool = True,
    plan_id: int = 0,
) -> tuple[PlanEpisodeState, np.ndarray]:
    if not plan:
        raise ValueError("plan must contain at least one step")
    state, obs = E.reset(config, seed)
    eps = PlanEpisodeState(
        env_state=state,
        plan=tuple(plan),
        instruction=instruction,
        targets=tuple(targets) if targets is not None else (None,) * len(plan),
        strict=strict,
        auto_done=auto_done,
        ordered=ordered,
        closure=required_closure(instruction.goals),
        seed=seed,
        plan_id=plan_id,
    )
    return eps, obs


def episode_step(eps: PlanEpisodeState, action: int, *, inplace: bool = True) -> PlanEpisodeState:
    """Advance the episode by one action.

    ``inplace`` defaults to True because episode states are driver-owned;
    pass False to keep the input untouched.
    """
    if eps.terminated:
        raise E.ContractViolation("episode already terminated")
    if not inplace:
        eps = PlanEpisodeState(**{**eps.__dict__, "env_state": eps.env_state.copy(),
                                  "achievements": list(eps.achievements)})
    world = eps.env_state
    if int(action) == DONE:
        if world.step_count >= world.config.max_steps:
            raise E.EpisodeExhausted("episode already used its step budget")
        eps.pointer += 1
        world.step_count += 1
        if eps.exhausted:
            eps.exhausted_by_done = True
    else:
        _, events = E.transition(world, action, inplace=True)
        if events:
            eps.achievements.extend(events)
            if eps.strict and any(ev.subtask_id not in eps.closure for ev in events):
                eps.terminated = True
        if eps.auto_done:
            while not eps.exhausted and eps.targets[eps.pointer] in world.achieved:
                eps.pointer += 1
    if eps.exhausted or world.step_count >= world.config.max_steps:
        eps.terminated = True
    return eps


def evaluate_strict(
    achievements: Sequence[E.AchievementEvent],
    goals: Sequence[int],
    *,
    closure: frozenset[int] | None = None,
    require_done: bool = False,
    exhausted_by_done: bool = True,
    ordered: bool = True,
) -> bool:
    """Did the episode do exactly what was asked?

    All goals fired, in order (first-trigger times), nothing outside the
    goals' prerequisite closure fired, and in DONE mode the plan was used up
    through DONE.
    """
    if closure is None:
        closure = required_closure(goals)
    first: dict[int, int] = {}
    for ev in achievements:
        first.setdefault(ev.subtask_id, ev.step_index)
    if any(g not in first for g in goals):
        return False
    if ordered:
        times = [first[g] for g in goals]
        if any(b < a for a, b in zip(times, times[1:])):
            return False
    if any(a not in closure for a in first):
        return False
    if require_done and not exhausted_by_done:
        return False
    return True


def finish(eps: PlanEpisodeState) -> EpisodeOutcome:
    if not eps.terminated:
        raise E.ContractViolation("episode has not terminated")
    ok = evaluate_strict(
        eps.achievements,
        eps.instruction.goals,
        closure=eps.closure,
        require_done=not eps.auto_done,
        exhausted_by_done=eps.exhausted_by_done,
        ordered=eps.ordered,
    )
    return EpisodeOutcome(
        success=ok,
        achieved=frozenset(ev.subtask_id for ev in eps.achievements),
        steps_used=eps.env_state.step_count,
        plan_id=eps.plan_id,
        instruction_id=eps.instruction.id,
        seed=eps.seed,
    )


def trace_record(eps: PlanEpisodeState, action: int) -> dict:
    """One JSON-lines debug record for a step just taken."""
    return {
        "instruction_id": eps.instruction.id,
        "seed": eps.seed,
        "step": eps.env_state.step_count,
        "action": Action(int(action)).name,
        "pointer": eps.pointer,
        "achieved": sorted(eps.env_state.achieved),
        "terminated": eps.terminated,
    }
