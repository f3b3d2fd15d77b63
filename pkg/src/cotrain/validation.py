"""Multi-seed plan validation and preference-pair construction."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from typing import Mapping, Sequence

from . import env as E
from .agent import PPOConfig, PlanTask, PolicyParams, run_episodes
from .planner import PreferencePair
from .rng import derive_seed

# pairs whose SR gap falls short of the margin by float noise alone still count
MARGIN_TOLERANCE = 1e-12


@dataclass(frozen=True)
class PlanResult:
    instruction_id: int
    variant: int
    split: str
    sr: float
    n_seeds: int
    successes: int
    mean_steps_to_success: float | None

    def to_json(self) -> dict:
        return dict(self.__dict__)


@dataclass
class ValidationReport:
    entries: list[PlanResult]
    seeds: list[int] = field(default_factory=list)

    def sr_map(self) -> dict[tuple[int, int], float]:
        return {(e.instruction_id, e.variant): e.sr for e in self.entries}

    def split_sr(self) -> dict[str, float]:
        acc: dict[str, list[float]] = {}
        for e in self.entries:
            acc.setdefault(e.split, []).append(e.sr)
        return {k: sum(v) / len(v) for k, v in sorted(acc.items())}

    def sr_spread(self) -> float:
        """Largest SR gap between two variants of the same instruction."""
        by_ins: dict[int, list[float]] = {}
        for e in self.entries:
            by_ins.setdefault(e.instruction_id, []).append(e.sr)
        return max((max(v) - min(v) for v in by_ins.values()), default=0.0)

    def save_jsonl(self, path) -> None:
        with open(path, "w") as fh:
            for e in self.entries:
                fh.write(json.dumps(e.to_json(), sort_keys=True) + "\n")

    def save_split_csv(self, path) -> None:
        counts: dict[str, int] = {}
        for e in self.entries:
            counts[e.split] = counts.get(e.split, 0) + 1
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["split", "n_plans", "mean_sr"])
            for split, sr in self.split_sr().items():
                w.writerow([split, counts[split], f"{sr:.6f}"])

    @classmethod
    def load_jsonl(cls, path) -> "ValidationReport":
        with open(path) as fh:
            return cls([PlanResult(**json.loads(line)) for line in fh if line.strip()])


def validation_seeds(master_seed: int, n: int, stream: str = "validation") -> list[int]:
    """World seeds for evaluation, drawn from a stream disjoint from training."""
    return [derive_seed(master_seed, stream, i) for i in range(n)]


def validate_plans(
    params: PolicyParams,
    tasks: Sequence[PlanTask],
    env_config: E.EnvConfig,
    seeds: Sequence[int],
    *,
    greedy: bool = True,
    auto_done: bool = False,
    embedding_scale: float = PPOConfig.embedding_scale,
    sample_seed: int = 0,
) -> ValidationReport:
    """Run every plan on every seed in strict mode and aggregate success rates."""
    if not seeds:
        raise ValueError("validation needs at least one seed")
    if not tasks:
        raise ValueError("nothing to validate")
    jobs = [(t, s) for t in tasks for s in seeds]
    outcomes = run_episodes(params, jobs, env_config, auto_done=auto_done, greedy=greedy,
                            seed=sample_seed, embedding_scale=embedding_scale)
    n = len(seeds)
    entries = []
    for i, t in enumerate(tasks):
        outs = outcomes[i * n:(i + 1) * n]
        wins = [o for o in outs if o.success]
        steps = sum(o.steps_used for o in wins) / len(wins) if wins else None
        entries.append(PlanResult(t.instruction.id, t.variant, t.instruction.split.value,
                                  len(wins) / n, n, len(wins), steps))
    return ValidationReport(entries, list(seeds))


def build_preference_pairs(report: ValidationReport, margin: float = 0.1) -> list[PreferencePair]:
    """All ordered (winner, loser) variant pairs of an instruction separated by ``margin``."""
    by_ins: dict[int, list[PlanResult]] = {}
    for e in report.entries:
        by_ins.setdefault(e.instruction_id, []).append(e)
    pairs = []
    for iid in sorted(by_ins):
        group = sorted(by_ins[iid], key=lambda e: e.variant)
        for w in group:
            for l in group:
                if w.variant != l.variant and w.sr - l.sr >= margin - MARGIN_TOLERANCE:
                    pairs.append(PreferencePair(iid, w.variant, l.variant, w.sr, l.sr))
    return pairs


def outcome_table(report: ValidationReport) -> Mapping[tuple[int, int], PlanResult]:
    return {(e.instruction_id, e.variant): e for e in report.entries}
