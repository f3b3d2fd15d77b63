"""The fixed technology tree: achievements, recipes and their prerequisites.

Achievement ids double as ground-truth subtask ids. Every prerequisite
relation here is *derived* from the recipe tables rather than written by
hand, so the environment rules and the ground-truth ontology cannot drift.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, field
from enum import IntEnum
from typing import Iterable


class Cell(IntEnum):
    GRASS = 0
    TREE = 1
    STONE = 2
    COAL = 3
    IRON = 4
    WATER = 5
    SAND = 6
    COW = 7
    TABLE = 8
    FURNACE = 9


class Item(IntEnum):
    WOOD = 0
    STONE = 1
    COAL = 2
    IRON = 3
    BEEF = 4
    WOODEN_PICKAXE = 5
    STONE_PICKAXE = 6
    IRON_PICKAXE = 7
    WOODEN_SWORD = 8
    STONE_SWORD = 9


class Action(IntEnum):
    MOVE_UP = 0
    MOVE_DOWN = 1
    MOVE_LEFT = 2
    MOVE_RIGHT = 3
    DO = 4
    PLACE_TABLE = 5
    PLACE_FURNACE = 6
    PLACE_STONE = 7
    CRAFT_WOODEN_PICKAXE = 8
    CRAFT_STONE_PICKAXE = 9
    CRAFT_IRON_PICKAXE = 10
    CRAFT_WOODEN_SWORD = 11
    CRAFT_STONE_SWORD = 12
    EAT = 13
    DONE = 14


N_ACTIONS = len(Action)


class Achievement(IntEnum):
    GATHER_WOOD = 0
    PLACE_TABLE = 1
    CRAFT_WOODEN_PICKAXE = 2
    CRAFT_WOODEN_SWORD = 3
    GATHER_STONE = 4
    PLACE_STONE = 5
    CRAFT_STONE_PICKAXE = 6
    CRAFT_STONE_SWORD = 7
    PLACE_FURNACE = 8
    GATHER_COAL = 9
    GATHER_IRON = 10
    CRAFT_IRON_PICKAXE = 11
    DRINK_WATER = 12
    EAT_BEEF = 13


N_ACHIEVEMENTS = len(Achievement)

# (skill_name, argument name, argument value) per achievement.
_SKILL_PARTS: dict[Achievement, tuple[str, str, str]] = {
    Achievement.GATHER_WOOD: ("gather_resource", "resource_type", "wood"),
    Achievement.PLACE_TABLE: ("place_structure", "structure", "table"),
    Achievement.CRAFT_WOODEN_PICKAXE: ("create_item", "item_type", "wooden_pickaxe"),
    Achievement.CRAFT_WOODEN_SWORD: ("create_item", "item_type", "wooden_sword"),
    Achievement.GATHER_STONE: ("gather_resource", "resource_type", "stone"),
    Achievement.PLACE_STONE: ("place_structure", "structure", "stone"),
    Achievement.CRAFT_STONE_PICKAXE: ("create_item", "item_type", "stone_pickaxe"),
    Achievement.CRAFT_STONE_SWORD: ("create_item", "item_type", "stone_sword"),
    Achievement.PLACE_FURNACE: ("place_structure", "structure", "furnace"),
    Achievement.GATHER_COAL: ("gather_resource", "resource_type", "coal"),
    Achievement.GATHER_IRON: ("gather_resource", "resource_type", "iron"),
    Achievement.CRAFT_IRON_PICKAXE: ("create_item", "item_type", "iron_pickaxe"),
    Achievement.DRINK_WATER: ("consume", "item", "water"),
    Achievement.EAT_BEEF: ("consume", "item", "beef"),
}

# Alternative skill names an imperfect planner may use for the same skill.
SKILL_SYNONYMS: dict[str, tuple[str, ...]] = {
    "gather_resource": ("collect_resource", "mine_resource", "obtain_resource"),
    "place_structure": ("build_structure", "put_structure", "construct_structure"),
    "create_item": ("craft_item", "make_item", "forge_item"),
    "consume": ("ingest", "take_in", "use_up"),
}


def format_canonical(skill: str, args: Iterable[tuple[str, str]]) -> str:
    inner = ", ".join(f"{k} = {v}" for k, v in args)
    return f"{skill}({inner})"


CANONICAL: dict[Achievement, str] = {
    a: format_canonical(skill, [(arg, val)]) for a, (skill, arg, val) in _SKILL_PARTS.items()
}

_CANON_RE = re.compile(r"^([a-z_][a-z0-9_]*)\(([a-z_][a-z0-9_]* = [a-z0-9_]+(, [a-z_][a-z0-9_]* = [a-z0-9_]+)*)?\)$")


def is_canonical_format(s: str) -> bool:
    return bool(_CANON_RE.match(s))


def synonym_canonical(a: Achievement, variant: int) -> str:
    """The ``variant``-th synonymous spelling of achievement ``a`` (0-based)."""
    skill, arg, val = _SKILL_PARTS[a]
    alts = SKILL_SYNONYMS[skill]
    return format_canonical(alts[variant % len(alts)], [(arg, val)])


def _build_resolver() -> dict[str, Achievement]:
    table: dict[str, Achievement] = {}
    for a, (skill, arg, val) in _SKILL_PARTS.items():
        table[CANONICAL[a]] = a
        for alt in SKILL_SYNONYMS[skill]:
            table[format_canonical(alt, [(arg, val)])] = a
    return table


_RESOLVE = _build_resolver()


def resolve(canonical: str) -> Achievement | None:
    """Ground-truth achievement named by a canonical (or synonymous) string."""
    return _RESOLVE.get(canonical)


# ---------------------------------------------------------------------------
# Recipe tables


@dataclass(frozen=True)
class Recipe:
    """A place/craft/eat action: what it consumes, needs and produces."""

    action: Action
    achievement: Achievement
    consumes: dict[Item, int] = field(default_factory=dict)
    nearby: frozenset[Cell] = frozenset()
    produces_item: Item | None = None
    places: Cell | None = None
    place_on: frozenset[Cell] = frozenset()


_PLACEABLE = frozenset({Cell.GRASS, Cell.SAND})

RECIPES: dict[Action, Recipe] = {
    r.action: r
    for r in (
        Recipe(Action.PLACE_TABLE, Achievement.PLACE_TABLE, {Item.WOOD: 1},
               places=Cell.TABLE, place_on=_PLACEABLE),
        Recipe(Action.PLACE_FURNACE, Achievement.PLACE_FURNACE, {Item.STONE: 1},
               nearby=frozenset({Cell.TABLE}), places=Cell.FURNACE, place_on=_PLACEABLE),
        Recipe(Action.PLACE_STONE, Achievement.PLACE_STONE, {Item.STONE: 1},
               places=Cell.STONE, place_on=_PLACEABLE | {Cell.WATER}),
        Recipe(Action.CRAFT_WOODEN_PICKAXE, Achievement.CRAFT_WOODEN_PICKAXE, {Item.WOOD: 1},
               nearby=frozenset({Cell.TABLE}), produces_item=Item.WOODEN_PICKAXE),
        Recipe(Action.CRAFT_WOODEN_SWORD, Achievement.CRAFT_WOODEN_SWORD, {Item.WOOD: 1},
               nearby=frozenset({Cell.TABLE}), produces_item=Item.WOODEN_SWORD),
        Recipe(Action.CRAFT_STONE_PICKAXE, Achievement.CRAFT_STONE_PICKAXE,
               {Item.WOOD: 1, Item.STONE: 1},
               nearby=frozenset({Cell.TABLE}), produces_item=Item.STONE_PICKAXE),
        Recipe(Action.CRAFT_STONE_SWORD, Achievement.CRAFT_STONE_SWORD,
               {Item.WOOD: 1, Item.STONE: 1},
               nearby=frozenset({Cell.TABLE}), produces_item=Item.STONE_SWORD),
        Recipe(Action.CRAFT_IRON_PICKAXE, Achievement.CRAFT_IRON_PICKAXE,
               {Item.WOOD: 1, Item.COAL: 1, Item.IRON: 1},
               nearby=frozenset({Cell.TABLE, Cell.FURNACE}), produces_item=Item.IRON_PICKAXE),
        Recipe(Action.EAT, Achievement.EAT_BEEF, {Item.BEEF: 1}),
    )
}


@dataclass(frozen=True)
class Harvest:
    """What DO does when facing a cell of a given kind."""

    item: Item | None
    tool: Item | None
    achievement: Achievement | None
    leaves: Cell | None  # cell left behind; None keeps the cell


HARVEST: dict[Cell, Harvest] = {
    Cell.TREE: Harvest(Item.WOOD, None, Achievement.GATHER_WOOD, None),
    Cell.STONE: Harvest(Item.STONE, Item.WOODEN_PICKAXE, Achievement.GATHER_STONE, Cell.GRASS),
    Cell.COAL: Harvest(Item.COAL, Item.STONE_PICKAXE, Achievement.GATHER_COAL, Cell.GRASS),
    Cell.IRON: Harvest(Item.IRON, Item.STONE_PICKAXE, Achievement.GATHER_IRON, Cell.GRASS),
    Cell.WATER: Harvest(None, None, Achievement.DRINK_WATER, None),
    Cell.COW: Harvest(Item.BEEF, None, None, Cell.GRASS),
}


def _producers() -> tuple[dict[Item, Achievement], dict[Cell, Achievement]]:
    items: dict[Item, Achievement] = {}
    cells: dict[Cell, Achievement] = {}
    for h in HARVEST.values():
        if h.item is not None and h.achievement is not None:
            items[h.item] = h.achievement
    for r in RECIPES.values():
        if r.produces_item is not None:
            items[r.produces_item] = r.achievement
        if r.places in (Cell.TABLE, Cell.FURNACE):
            cells[r.places] = r.achievement
    return items, cells


def _derive_prereqs() -> dict[Achievement, frozenset[Achievement]]:
    item_src, cell_src = _producers()
    out: dict[Achievement, frozenset[Achievement]] = {}
    for h in HARVEST.values():
        if h.achievement is not None:
            out[h.achievement] = frozenset({item_src[h.tool]} if h.tool is not None else ())
    for r in RECIPES.values():
        req = {item_src[i] for i in r.consumes if i in item_src}
        req |= {cell_src[c] for c in r.nearby}
        out[r.achievement] = frozenset(req)
    return {a: out[a] for a in Achievement}


TRUE_PREREQS: dict[Achievement, frozenset[Achievement]] = _derive_prereqs()


def prerequisite_edges() -> set[tuple[int, int]]:
    """Ground-truth direct prerequisite edges ``(required, dependent)``."""
    return {(int(r), int(t)) for t, reqs in TRUE_PREREQS.items() for r in reqs}


def required_closure(goals: Iterable[int]) -> frozenset[int]:
    """Goals plus all their transitive prerequisites under the true tree."""
    seen: set[int] = set()
    stack = [int(g) for g in goals]
    while stack:
        a = stack.pop()
        if a in seen:
            continue
        seen.add(a)
        stack.extend(int(p) for p in TRUE_PREREQS[Achievement(a)])
    return frozenset(seen)
