"""Scripted stand-in for the plan-generating language model.

The oracle answers two kinds of question, both pure request/response:

* ``extract_goals(instruction, bank)`` - which subtasks does the instruction ask for;
* ``query_prereqs(target, candidates, query_index)`` - which candidates must be
  done before ``target``.

Answers come from the ground-truth tech tree with independent per-query noise.
Each query draws from its own generator keyed by the query identity, so the
same question always gets the same answer regardless of call order.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Iterable, Protocol, Sequence

from .rng import XorShift64Star, derive_seed
from .tasks import Instruction
from .techtree import (
    CANONICAL,
    SKILL_SYNONYMS,
    TRUE_PREREQS,
    Achievement,
    resolve,
    synonym_canonical,
)


@dataclass(frozen=True)
class OracleConfig:
    flip_noise: float = 0.1
    spurious_rate: float = 0.05
    synonym_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        for name in ("flip_noise", "spurious_rate", "synonym_rate"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name}={v} outside [0, 1]")

    def to_dict(self) -> dict:
        return dict(self.__dict__)


class Oracle(Protocol):
    def extract_goals(self, instruction: Instruction, bank: Sequence[str]) -> list[str]: ...

    def query_prereqs(self, target: str, candidates: Iterable[str], query_index: int) -> set[str]: ...


def is_true_prereq(required: str, target: str) -> bool:
    r, t = resolve(required), resolve(target)
    if r is None or t is None:
        return False
    return r in TRUE_PREREQS[t]


class ScriptedOracle:
    def __init__(self, config: OracleConfig = OracleConfig()):
        self.config = config

    def extract_goals(self, instruction: Instruction, bank: Sequence[str]) -> list[str]:
        rng = XorShift64Star(derive_seed(self.config.seed, "goals", instruction.id))
        out = []
        n_alts = len(next(iter(SKILL_SYNONYMS.values())))
        for g in instruction.goals:
            if rng.chance(self.config.synonym_rate):
                out.append(synonym_canonical(Achievement(g), rng.below(n_alts)))
            else:
                out.append(CANONICAL[Achievement(g)])
        return out

    def query_prereqs(self, target: str, candidates: Iterable[str], query_index: int) -> set[str]:
        cands = sorted(set(candidates))
        if target in cands:
            raise ValueError("target must not be among its own candidates")
        rng = XorShift64Star(derive_seed(self.config.seed, "prereq", target, query_index))
        truth = {c for c in cands if is_true_prereq(c, target)}
        out = set()
        for c in cands:
            keep = c in truth
            if rng.chance(self.config.flip_noise):
                keep = not keep
            if keep:
                out.add(c)
        if rng.chance(self.config.spurious_rate):
            extra = [c for c in cands if c not in truth and c not in out]
            if extra:
                out.add(extra[rng.below(len(extra))])
        return out


class RecordingOracle:
    """Wraps an oracle and appends every exchange to a JSON-lines log."""

    def __init__(self, inner: Oracle, path):
        self.inner = inner
        self.path = path
        self._fh = open(path, "a")

    def extract_goals(self, instruction: Instruction, bank: Sequence[str]) -> list[str]:
        ans = self.inner.extract_goals(instruction, bank)
        self._write({"kind": "goals", "instruction_id": instruction.id, "response": ans})
        return ans

    def query_prereqs(self, target: str, candidates: Iterable[str], query_index: int) -> set[str]:
        cands = sorted(set(candidates))
        ans = self.inner.query_prereqs(target, cands, query_index)
        self._write({"kind": "prereqs", "target": target, "candidates": cands,
                     "query_index": query_index, "response": sorted(ans)})
        return ans

    def _write(self, rec: dict) -> None:
        self._fh.write(json.dumps(rec, sort_keys=True) + "\n")
        self._fh.flush()

    def close(self) -> None:
        self._fh.close()


class ReplayOracle:
    """Serves a recorded log verbatim; unknown questions raise ``KeyError``."""

    def __init__(self, path):
        self._goals: dict[int, list[str]] = {}
        self._prereqs: dict[tuple, set[str]] = {}
        with open(path) as fh:
            for line in fh:
                if not line.strip():
                    continue
                rec = json.loads(line)
                if rec["kind"] == "goals":
                    self._goals[rec["instruction_id"]] = list(rec["response"])
                else:
                    key = (rec["target"], tuple(rec["candidates"]), rec["query_index"])
                    self._prereqs[key] = set(rec["response"])

    def extract_goals(self, instruction: Instruction, bank: Sequence[str]) -> list[str]:
        return list(self._goals[instruction.id])

    def query_prereqs(self, target: str, candidates: Iterable[str], query_index: int) -> set[str]:
        return set(self._prereqs[(target, tuple(sorted(set(candidates))), query_index)])

