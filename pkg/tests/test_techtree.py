"""The recipe tables checked against an independent, hand-written rule book."""

import itertools

import numpy as np
import pytest

from cotrain import env as E
from cotrain.techtree import (
    CANONICAL,
    TRUE_PREREQS,
    Achievement as Ac,
    Action,
    Cell,
    Item,
    is_canonical_format,
    prerequisite_edges,
    required_closure,
    resolve,
    synonym_canonical,
)

# action -> (needed items, needed nearby structures, valid targets or None, produced item)
RULE_BOOK = {
    Action.PLACE_TABLE: ({Item.WOOD: 1}, set(), {Cell.GRASS, Cell.SAND}, None),
    Action.PLACE_FURNACE: ({Item.STONE: 1}, {Cell.TABLE}, {Cell.GRASS, Cell.SAND}, None),
    Action.PLACE_STONE: ({Item.STONE: 1}, set(), {Cell.GRASS, Cell.SAND, Cell.WATER}, None),
    Action.CRAFT_WOODEN_PICKAXE: ({Item.WOOD: 1}, {Cell.TABLE}, None, Item.WOODEN_PICKAXE),
    Action.CRAFT_WOODEN_SWORD: ({Item.WOOD: 1}, {Cell.TABLE}, None, Item.WOODEN_SWORD),
    Action.CRAFT_STONE_PICKAXE: ({Item.WOOD: 1, Item.STONE: 1}, {Cell.TABLE}, None, Item.STONE_PICKAXE),
    Action.CRAFT_STONE_SWORD: ({Item.WOOD: 1, Item.STONE: 1}, {Cell.TABLE}, None, Item.STONE_SWORD),
    Action.CRAFT_IRON_PICKAXE: ({Item.WOOD: 1, Item.COAL: 1, Item.IRON: 1},
                                {Cell.TABLE, Cell.FURNACE}, None, Item.IRON_PICKAXE),
    Action.EAT: ({Item.BEEF: 1}, set(), None, None),
}
PLACES = {Action.PLACE_TABLE: Cell.TABLE, Action.PLACE_FURNACE: Cell.FURNACE,
          Action.PLACE_STONE: Cell.STONE}
ACHIEVES = {
    Action.PLACE_TABLE: Ac.PLACE_TABLE, Action.PLACE_FURNACE: Ac.PLACE_FURNACE,
    Action.PLACE_STONE: Ac.PLACE_STONE, Action.CRAFT_WOODEN_PICKAXE: Ac.CRAFT_WOODEN_PICKAXE,
    Action.CRAFT_WOODEN_SWORD: Ac.CRAFT_WOODEN_SWORD, Action.CRAFT_STONE_PICKAXE: Ac.CRAFT_STONE_PICKAXE,
    Action.CRAFT_STONE_SWORD: Ac.CRAFT_STONE_SWORD, Action.CRAFT_IRON_PICKAXE: Ac.CRAFT_IRON_PICKAXE,
    Action.EAT: Ac.EAT_BEEF,
}
# cell -> (tool needed, item gained, achievement)
HARVEST_BOOK = {
    Cell.TREE: (None, Item.WOOD, Ac.GATHER_WOOD),
    Cell.STONE: (Item.WOODEN_PICKAXE, Item.STONE, Ac.GATHER_STONE),
    Cell.COAL: (Item.STONE_PICKAXE, Item.COAL, Ac.GATHER_COAL),
    Cell.IRON: (Item.STONE_PICKAXE, Item.IRON, Ac.GATHER_IRON),
    Cell.WATER: (None, None, Ac.DRINK_WATER),
    Cell.COW: (None, Item.BEEF, None),
}

CFG = E.EnvConfig(grid_size=5, view_radius=2)
RESOURCES = (Item.WOOD, Item.STONE, Item.COAL, Item.IRON, Item.BEEF)


def _state(inv, table, furnace, target):
    grid = np.zeros((5, 5), dtype=np.uint8)
    if table:
        grid[1, 1] = Cell.TABLE
    if furnace:
        grid[1, 3] = Cell.FURNACE
    grid[3, 2] = target
    return E.make_state(CFG, grid, (2, 2), facing=1, inventory=inv)


def test_exhaustive_precondition_enumeration():
    checked = 0
    for counts in itertools.product(range(3), repeat=len(RESOURCES)):
        inv = dict(zip(RESOURCES, counts))
        for table, furnace, target in itertools.product((0, 1), (0, 1),
                                                        (Cell.GRASS, Cell.WATER, Cell.TREE)):
            for action, (needs, near, targets, produces) in RULE_BOOK.items():
                s0 = _state(inv, table, furnace, target)
                s1, _, events = E.step(s0, action)
                have_near = ({Cell.TABLE} if table else set()) | ({Cell.FURNACE} if furnace else set())
                ok = (all(inv[i] >= n for i, n in needs.items()) and near <= have_near
                      and (targets is None or target in targets))
                expect_inv = list(s0.inventory)
                if ok:
                    for i, n in needs.items():
                        expect_inv[i] -= n
                    if produces is not None:
                        expect_inv[produces] += 1
                assert s1.inventory == expect_inv, (action, inv, table, furnace, target)
                assert [e.subtask_id for e in events] == ([int(ACHIEVES[action])] if ok else [])
                placed = s1.cell(3, 2)
                assert placed == (PLACES[action] if ok and action in PLACES else target)
                checked += 1
    assert checked == 3 ** 5 * 12 * len(RULE_BOOK)


@pytest.mark.parametrize("cell", list(HARVEST_BOOK))
@pytest.mark.parametrize("has_tool", [False, True])
def test_harvest_rules(cell, has_tool):
    tool, item, ach = HARVEST_BOOK[cell]
    inv = {tool: 1} if (tool is not None and has_tool) else {}
    s0 = _state(inv, False, False, cell)
    s1, _, events = E.step(s0, Action.DO)
    ok = tool is None or has_tool
    if item is not None:
        assert s1.inventory[item] == (1 if ok else 0)
    assert [e.subtask_id for e in events] == ([int(ach)] if ok and ach is not None else [])


def test_iron_pickaxe_example():
    s = _state({Item.WOOD: 1, Item.COAL: 1, Item.IRON: 1}, True, True, Cell.GRASS)
    s, _, events = E.step(s, Action.CRAFT_IRON_PICKAXE)
    assert s.inventory[Item.IRON_PICKAXE] == 1
    assert s.inventory[Item.WOOD] == s.inventory[Item.COAL] == s.inventory[Item.IRON] == 0
    assert [e.subtask_id for e in events] == [int(Ac.CRAFT_IRON_PICKAXE)]


def test_prerequisites_match_hand_written_table():
    expected = {
        Ac.GATHER_WOOD: set(),
        Ac.PLACE_TABLE: {Ac.GATHER_WOOD},
        Ac.CRAFT_WOODEN_PICKAXE: {Ac.GATHER_WOOD, Ac.PLACE_TABLE},
        Ac.CRAFT_WOODEN_SWORD: {Ac.GATHER_WOOD, Ac.PLACE_TABLE},
        Ac.GATHER_STONE: {Ac.CRAFT_WOODEN_PICKAXE},
        Ac.PLACE_STONE: {Ac.GATHER_STONE},
        Ac.CRAFT_STONE_PICKAXE: {Ac.GATHER_WOOD, Ac.GATHER_STONE, Ac.PLACE_TABLE},
        Ac.CRAFT_STONE_SWORD: {Ac.GATHER_WOOD, Ac.GATHER_STONE, Ac.PLACE_TABLE},
        Ac.PLACE_FURNACE: {Ac.GATHER_STONE, Ac.PLACE_TABLE},
        Ac.GATHER_COAL: {Ac.CRAFT_STONE_PICKAXE},
        Ac.GATHER_IRON: {Ac.CRAFT_STONE_PICKAXE},
        Ac.CRAFT_IRON_PICKAXE: {Ac.GATHER_WOOD, Ac.GATHER_COAL, Ac.GATHER_IRON,
                                Ac.PLACE_TABLE, Ac.PLACE_FURNACE},
        Ac.DRINK_WATER: set(),
        Ac.EAT_BEEF: set(),
    }
    assert {a: set(p) for a, p in TRUE_PREREQS.items()} == expected
    assert len(prerequisite_edges()) == 22


def test_closure_of_furnace():
    assert required_closure([Ac.PLACE_FURNACE]) == {
        Ac.GATHER_WOOD, Ac.PLACE_TABLE, Ac.CRAFT_WOODEN_PICKAXE, Ac.GATHER_STONE, Ac.PLACE_FURNACE}


def test_canonical_strings():
    assert CANONICAL[Ac.PLACE_FURNACE] == "place_structure(structure = furnace)"
    assert len(set(CANONICAL.values())) == 14
    for a in Ac:
        assert is_canonical_format(CANONICAL[a])
        assert resolve(CANONICAL[a]) == a
        for v in range(3):
            syn = synonym_canonical(a, v)
            assert syn != CANONICAL[a] and resolve(syn) == a and is_canonical_format(syn)
    assert not is_canonical_format("place structure(furnace)")
