"""Seeded, partially observable crafting gridworld.

The world is a square grid of :class:`~cotrain.techtree.Cell` kinds. The agent
moves, harvests the cell it faces with ``DO``, places structures and crafts
tools near a table/furnace. Cows wander at random; that and per-seed map
generation are the only sources of stochasticity.

The grid is stored row-major in a ``bytearray`` with one trailing sentinel
byte (``OUTSIDE``) so observation windows can be gathered with a single
precomputed index table. ``step`` returns a new state unless ``inplace=True``;
the trainer uses the in-place form.
"""

from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from .rng import XorShift64Star, derive_seed
from .techtree import HARVEST, RECIPES, Action, Cell, Item

SNAPSHOT_VERSION = 1

N_CELL_KINDS = len(Cell)
N_ITEMS = len(Item)
OUTSIDE = N_CELL_KINDS
INVENTORY_CAP = 9
STATUS_MAX = 9
DECAY_PERIOD = 25
MAX_GENERATION_ATTEMPTS = 1000

_GRASS, _SAND, _COW, _TABLE, _FURNACE = (int(Cell.GRASS), int(Cell.SAND), int(Cell.COW),
                                          int(Cell.TABLE), int(Cell.FURNACE))
_WALKABLE = (_GRASS, _SAND)
REQUIRED_KINDS = tuple(int(c) for c in (Cell.TREE, Cell.STONE, Cell.COAL, Cell.IRON,
                                        Cell.WATER, Cell.COW))

# facing index -> (drow, dcol); matches MOVE_UP..MOVE_RIGHT
DIRECTIONS = ((-1, 0), (1, 0), (0, -1), (0, 1))

DEFAULT_DENSITIES: dict[str, float] = {
    "tree": 0.15,
    "stone": 0.18,
    "coal": 0.05,
    "iron": 0.05,
    "water": 0.06,
    "sand": 0.04,
    "cow": 0.04,
}

_KIND_BY_NAME = {c.name.lower(): int(c) for c in Cell}
# generation order is fixed so identical densities always produce identical maps
_GEN_ORDER = ("tree", "stone", "coal", "iron", "water", "sand", "cow")


class ConfigError(ValueError):
    pass


class ContractViolation(RuntimeError):
    pass


class EpisodeExhausted(RuntimeError):
    pass


@dataclass(frozen=True)
class EnvConfig:
    grid_size: int = 9
    view_radius: int = 2
    max_steps: int = 200
    resource_densities: Mapping[str, float] = field(default_factory=lambda: dict(DEFAULT_DENSITIES))
    seed: int = 0
    status_decay: bool = False
    # hunger/thirst start below the cap so eating and drinking leave a visible trace
    initial_status: int = 5

    def validate(self) -> None:
        if self.grid_size < 1 or self.view_radius < 1 or self.max_steps < 1:
            raise ConfigError("grid_size, view_radius and max_steps must be positive")
        if not 0 <= self.initial_status <= STATUS_MAX:
            raise ConfigError(f"initial_status must lie in [0, {STATUS_MAX}]")
        if self.grid_size < 2 * self.view_radius + 1:
            raise ConfigError(
                f"grid_size={self.grid_size} too small for view_radius={self.view_radius}"
            )
        total = 0.0
        for name, p in self.resource_densities.items():
            if name not in _GEN_ORDER:
                raise ConfigError(f"unknown resource kind {name!r}")
            if not 0.0 <= p <= 1.0:
                raise ConfigError(f"density for {name!r} outside [0, 1]")
            total += p
        if total > 1.0 + 1e-12:
            raise ConfigError("resource densities sum to more than 1")

    @property
    def observation_size(self) -> int:
        return observation_size(self.view_radius)

    def density_key(self) -> tuple[tuple[str, float], ...]:
        return tuple(sorted(self.resource_densities.items()))

    def to_dict(self) -> dict:
        return {
            "grid_size": self.grid_size,
            "view_radius": self.view_radius,
            "max_steps": self.max_steps,
            "resource_densities": dict(sorted(self.resource_densities.items())),
            "seed": self.seed,
            "status_decay": self.status_decay,
            "initial_status": self.initial_status,
        }

    @classmethod
    def from_dict(cls, d: Mapping) -> "EnvConfig":
        return cls(**dict(d))


def observation_size(view_radius: int) -> int:
    # window one-hot | facing direction | kind of the faced cell | inventory | status
    return (2 * view_radius + 1) ** 2 * N_CELL_KINDS + 4 + N_CELL_KINDS + N_ITEMS + 2


@dataclass
class WorldState:
    grid: bytearray  # row-major Cell codes plus one OUTSIDE sentinel
    size: int
    agent_pos: tuple[int, int]
    agent_facing: int
    inventory: list[int]  # indexed by Item
    status: list[int]  # [hunger, thirst]
    step_count: int
    rng_state: int
    achieved: set[int]
    config: EnvConfig

    def copy(self) -> "WorldState":
        return WorldState(
            bytearray(self.grid), self.size, self.agent_pos, self.agent_facing,
            list(self.inventory), list(self.status), self.step_count, self.rng_state,
            set(self.achieved), self.config,
        )

    @property
    def grid2d(self) -> np.ndarray:
        """Read-only 2-D view of the cell codes."""
        n = self.size
        view = np.frombuffer(bytes(self.grid[: n * n]), dtype=np.uint8).reshape(n, n)
        return view

    def cell(self, r: int, c: int) -> int:
        return self.grid[r * self.size + c]

    def set_cell(self, r: int, c: int, kind: int) -> None:
        self.grid[r * self.size + c] = int(kind)

    def inventory_map(self) -> dict[str, int]:
        return {it.name.lower(): self.inventory[it] for it in Item}


@dataclass(frozen=True)
class AchievementEvent:
    subtask_id: int
    step_index: int


# ---------------------------------------------------------------------------
# generation


def _thresholds(densities: tuple[tuple[str, float], ...]) -> list[tuple[int, int]]:
    d = dict(densities)
    acc = 0
    out = []
    for name in _GEN_ORDER:
        acc += int(d.get(name, 0.0) * (1 << 53))
        out.append((acc, _KIND_BY_NAME[name]))
    return out


def reachable_kinds(grid: bytearray | bytes, size: int, start: tuple[int, int]) -> set[int]:
    """Cell kinds the agent can stand next to, walking from ``start``."""
    seen = {start}
    queue = deque([start])
    touched: set[int] = set()
    while queue:
        r, c = queue.popleft()
        for dr, dc in DIRECTIONS:
            nr, nc = r + dr, c + dc
            if not (0 <= nr < size and 0 <= nc < size):
                continue
            kind = grid[nr * size + nc]
            touched.add(kind)
            if (kind == _GRASS or kind == _SAND) and (nr, nc) not in seen:
                seen.add((nr, nc))
                queue.append((nr, nc))
    return touched


@lru_cache(maxsize=8192)
def _generate(size: int, densities: tuple[tuple[str, float], ...], seed: int):
    thresholds = _thresholds(densities)
    n = size * size
    for sub_seed in range(MAX_GENERATION_ATTEMPTS):
        rng = XorShift64Star(derive_seed(seed, sub_seed, "world"))
        grid = bytearray(n + 1)
        grid[n] = OUTSIDE
        for i in range(n):
            u = rng.next_u64() >> 11
            for bound, kind in thresholds:
                if u < bound:
                    grid[i] = kind
                    break
        grass = [i for i in range(n) if grid[i] == _GRASS]
        if not grass:
            continue
        idx = grass[rng.below(len(grass))]
        pos = (idx // size, idx % size)
        touched = reachable_kinds(grid, size, pos)
        if all(k in touched for k in REQUIRED_KINDS):
            return bytes(grid), pos, rng.state
    raise ConfigError("could not generate a world with every resource reachable")


def reset(config: EnvConfig, seed: int | None = None) -> tuple[WorldState, np.ndarray]:
    """Generate the world for ``seed`` (defaults to ``config.seed``)."""
    config.validate()
    seed = config.seed if seed is None else seed
    grid, pos, rng_state = _generate(config.grid_size, config.density_key(), int(seed))
    state = WorldState(
        grid=bytearray(grid),
        size=config.grid_size,
        agent_pos=pos,
        agent_facing=1,
        inventory=[0] * N_ITEMS,
        status=[config.initial_status, config.initial_status],
        step_count=0,
        rng_state=rng_state,
        achieved=set(),
        config=config,
    )
    return state, observe(state)


# ---------------------------------------------------------------------------
# dynamics

_DO_TABLE: dict[int, tuple] = {
    int(cell): (
        None if h.item is None else int(h.item),
        None if h.tool is None else int(h.tool),
        None if h.achievement is None else int(h.achievement),
        None if h.leaves is None else int(h.leaves),
    )
    for cell, h in HARVEST.items()
}
_RECIPE_TABLE: dict[int, tuple] = {
    int(a): (
        tuple((int(i), n) for i, n in r.consumes.items()),
        tuple(int(c) for c in r.nearby),
        None if r.produces_item is None else int(r.produces_item),
        None if r.places is None else int(r.places),
        frozenset(int(c) for c in r.place_on),
        int(r.achievement),
    )
    for a, r in RECIPES.items()
}
_DONE = int(Action.DONE)
_DO = int(Action.DO)
_EAT = int(Action.EAT)
_WATER = int(Cell.WATER)


def _near(state: WorldState, kind: int) -> bool:
    r, c = state.agent_pos
    size = state.size
    grid = state.grid
    for rr in range(max(r - 1, 0), min(r + 2, size)):
        base = rr * size
        for cc in range(max(c - 1, 0), min(c + 2, size)):
            if grid[base + cc] == kind:
                return True
    return False


def _emit(state: WorldState, ach: int, events: list[AchievementEvent]) -> None:
    if ach not in state.achieved:
        state.achieved.add(ach)
        events.append(AchievementEvent(ach, state.step_count))


def _apply_action(state: WorldState, action: int, events: list[AchievementEvent]) -> None:
    grid = state.grid
    size = state.size
    inv = state.inventory
    r, c = state.agent_pos

    if action < 4:
        state.agent_facing = action
        dr, dc = DIRECTIONS[action]
        nr, nc = r + dr, c + dc
        if 0 <= nr < size and 0 <= nc < size and grid[nr * size + nc] in _WALKABLE:
            state.agent_pos = (nr, nc)
        return

    dr, dc = DIRECTIONS[state.agent_facing]
    tr, tc = r + dr, c + dc
    tidx = tr * size + tc if (0 <= tr < size and 0 <= tc < size) else -1
    target = grid[tidx] if tidx >= 0 else OUTSIDE

    if action == _DO:
        rule = _DO_TABLE.get(target)
        if rule is None:
            return
        item, tool, ach, leaves = rule
        if tool is not None and inv[tool] < 1:
            return
        if item is not None:
            inv[item] = min(inv[item] + 1, INVENTORY_CAP)
        if target == _WATER:
            state.status[1] = STATUS_MAX
        if leaves is not None:
            grid[tidx] = leaves
        if ach is not None:
            _emit(state, ach, events)
        return

    consumes, nearby, produces, places, place_on, ach = _RECIPE_TABLE[action]
    for i, n in consumes:
        if inv[i] < n:
            return
    for kind in nearby:
        if not _near(state, kind):
            return
    if places is not None:
        if target not in place_on:
            return
        grid[tidx] = places
    for i, n in consumes:
        inv[i] -= n
    if produces is not None:
        inv[produces] = min(inv[produces] + 1, INVENTORY_CAP)
    if action == _EAT:
        state.status[0] = STATUS_MAX
    _emit(state, ach, events)


def _move_cows(state: WorldState) -> None:
    grid = state.grid
    size = state.size
    n = size * size
    cows = []
    i = grid.find(_COW, 0, n)
    while i >= 0:
        cows.append(i)
        i = grid.find(_COW, i + 1, n)
    if not cows:
        return
    rng = XorShift64Star(state=state.rng_state)
    agent = state.agent_pos[0] * size + state.agent_pos[1]
    for i in cows:
        d = rng.below(4)
        if grid[i] != _COW:
            continue
        dr, dc = DIRECTIONS[d]
        nr, nc = i // size + dr, i % size + dc
        if 0 <= nr < size and 0 <= nc < size:
            j = nr * size + nc
            if grid[j] in _WALKABLE and j != agent:
                grid[j] = _COW
                grid[i] = _GRASS
    state.rng_state = rng.state


def step(
    state: WorldState, action: int, *, inplace: bool = False
) -> tuple[WorldState, np.ndarray, list[AchievementEvent]]:
    state, events = transition(state, action, inplace=inplace)
    return state, observe(state), events


def transition(
    state: WorldState, action: int, *, inplace: bool = False
) -> tuple[WorldState, list[AchievementEvent]]:
    """``step`` without building the observation."""
    action = int(action)
    if action == _DONE:
        raise ContractViolation("DONE is a plan-control action; route it through the episode driver")
    if not 0 <= action < _DONE:
        raise ContractViolation(f"unknown action {action}")
    if state.step_count >= state.config.max_steps:
        raise EpisodeExhausted(f"episode already used {state.step_count} steps")
    if not inplace:
        state = state.copy()
    events: list[AchievementEvent] = []
    _apply_action(state, action, events)
    _move_cows(state)
    state.step_count += 1
    if state.config.status_decay and state.step_count % DECAY_PERIOD == 0:
        state.status = [max(0, s - 1) for s in state.status]
    return state, events


# ---------------------------------------------------------------------------
# observation

# row OUTSIDE encodes "beyond the border" as all zeros
_ONEHOT = np.vstack([np.eye(N_CELL_KINDS), np.zeros((1, N_CELL_KINDS))])
_FACING = np.eye(4)
_SCALE = np.concatenate([np.full(N_ITEMS, 1.0 / INVENTORY_CAP), np.full(2, 1.0 / STATUS_MAX)])


@lru_cache(maxsize=64)
def _window_index(size: int, radius: int) -> np.ndarray:
    """(size*size, (2r+1)^2) gather indices; out-of-grid cells hit the sentinel."""
    out = np.full((size * size, (2 * radius + 1) ** 2), size * size, dtype=np.intp)
    for r in range(size):
        for c in range(size):
            k = 0
            for dr in range(-radius, radius + 1):
                for dc in range(-radius, radius + 1):
                    rr, cc = r + dr, c + dc
                    if 0 <= rr < size and 0 <= cc < size:
                        out[r * size + c, k] = rr * size + cc
                    k += 1
    return out


def observe(state: WorldState) -> np.ndarray:
    size = state.size
    idx = _window_index(size, state.config.view_radius)[state.agent_pos[0] * size + state.agent_pos[1]]
    codes = np.frombuffer(state.grid, dtype=np.uint8)[idx]
    w = 2 * state.config.view_radius + 1
    dr, dc = DIRECTIONS[state.agent_facing]
    faced = codes[(w * w) // 2 + dr * w + dc]
    counts = np.minimum(np.array(state.inventory + state.status, dtype=np.float64),
                        [INVENTORY_CAP] * N_ITEMS + [STATUS_MAX] * 2)
    return np.concatenate((_ONEHOT[codes].ravel(), _FACING[state.agent_facing], _ONEHOT[faced],
                           counts * _SCALE))


# ---------------------------------------------------------------------------
# snapshots


def to_snapshot(state: WorldState) -> dict:
    n = state.size
    return {
        "version": SNAPSHOT_VERSION,
        "grid_size": n,
        "grid": list(state.grid[: n * n]),
        "agent_pos": list(state.agent_pos),
        "agent_facing": state.agent_facing,
        "inventory": state.inventory_map(),
        "status": {"hunger": state.status[0], "thirst": state.status[1]},
        "step_count": state.step_count,
        "rng_state": state.rng_state,
        "achieved": sorted(state.achieved),
        "config": state.config.to_dict(),
    }


def from_snapshot(doc: Mapping) -> WorldState:
    if doc.get("version") != SNAPSHOT_VERSION:
        raise ValueError(f"unsupported snapshot version {doc.get('version')!r}")
    size = int(doc["grid_size"])
    grid = bytearray(doc["grid"])
    if len(grid) != size * size:
        raise ValueError("grid length does not match grid_size")
    grid.append(OUTSIDE)
    return WorldState(
        grid=grid,
        size=size,
        agent_pos=(int(doc["agent_pos"][0]), int(doc["agent_pos"][1])),
        agent_facing=int(doc["agent_facing"]),
        inventory=[int(doc["inventory"][it.name.lower()]) for it in Item],
        status=[int(doc["status"]["hunger"]), int(doc["status"]["thirst"])],
        step_count=int(doc["step_count"]),
        rng_state=int(doc["rng_state"]),
        achieved={int(a) for a in doc["achieved"]},
        config=EnvConfig.from_dict(doc["config"]),
    )


def snapshot_json(state: WorldState) -> str:
    return json.dumps(to_snapshot(state), sort_keys=True)


def make_state(
    config: EnvConfig,
    grid: np.ndarray | list,
    agent_pos: tuple[int, int],
    *,
    facing: int = 1,
    inventory: Mapping[int, int] | None = None,
    rng_state: int = 0x9E3779B97F4A7C15,
) -> WorldState:
    """Hand-built state, mainly for tests and debugging."""
    arr = np.asarray(grid, dtype=np.uint8)
    size = arr.shape[0]
    g = bytearray(arr.ravel().tobytes())
    g.append(OUTSIDE)
    inv = [0] * N_ITEMS
    for k, v in (inventory or {}).items():
        inv[int(k)] = int(v)
    return WorldState(g, size, tuple(agent_pos), facing, inv, [config.initial_status] * 2, 0,
                      rng_state, set(), config)
