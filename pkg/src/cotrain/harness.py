"""Pipeline orchestration: stages, persistence, manifests and rank tables.

Every stage reads its inputs from the output directory and writes its
outputs back there, so any completed prefix of a run can be resumed and
re-running a stage from persisted inputs reproduces its outputs exactly.
"""

from __future__ import annotations

import csv
import dataclasses
import hashlib
import json
import logging
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Callable, Mapping, Sequence

import numpy as np
from filelock import FileLock, Timeout
from scipy.stats import spearmanr

from . import agent as A
from . import env as E
from . import ontology as O
from . import planner as P
from . import validation as V
from .oracle import OracleConfig, ScriptedOracle
from .rng import derive_seed
from .tasks import TRAIN_SPLITS, GenConfig, Instruction, Split, generate_dataset, load_dataset, save_dataset

log = logging.getLogger(__name__)

METRICS_SCHEMA = 1


class StageError(RuntimeError):
    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class LockedError(RuntimeError):
    pass


# ---------------------------------------------------------------------------
# configuration


@dataclass(frozen=True)
class OntologySettings:
    n_queries: int = 20
    tau_wilson: float = 0.5
    z: float = 1.96
    accumulate_passes: bool = False
    max_variants: int = 20


@dataclass(frozen=True)
class PlannerSettings:
    beta: float = 0.5
    sft_lr: float = 0.05
    sft_epochs: int = 300
    dpo_lr: float = 1e-2
    dpo_epochs: int = 1
    margin: float = 0.1
    top_k: int = 5
    pair_cap: int = 256
    init_scale: float = 0.1


@dataclass(frozen=True)
class Flags:
    ontology: bool = True
    curriculum: bool = True
    dpo: bool = True
    sft: bool = True
    auto_done: bool = False
    no_plan: bool = False


# The five component-ablation rows plus the two baselines.
ABLATIONS: dict[str, dict[str, bool]] = {
    "no-ontology": {"ontology": False},
    "no-curriculum": {"curriculum": False},
    "no-dpo": {"dpo": False},
    "no-sft": {"sft": False},
    "full": {},
    "auto-done": {"auto_done": True},
    "no-plan": {"no_plan": True, "curriculum": False},
}


def _desk_agent() -> A.PPOConfig:
    # the PPO-T settings quoted for the main experiments
    return A.ppo_profile("ppo_t")


@dataclass(frozen=True)
class PipelineConfig:
    cycles: int = 2
    seed: int = 0
    env: E.EnvConfig = field(default_factory=E.EnvConfig)
    dataset: GenConfig = field(default_factory=GenConfig)
    oracle: OracleConfig = field(default_factory=OracleConfig)
    ontology: OntologySettings = field(default_factory=OntologySettings)
    planner: PlannerSettings = field(default_factory=PlannerSettings)
    agent: A.PPOConfig = field(default_factory=_desk_agent)
    train_steps: int = 2_000_000
    validation_seeds: int = 20
    eval_seeds: int = 20
    # greedy (argmax) evaluation unless set; sampled actions are seeded per stage
    sampled_eval: bool = False
    flags: Flags = field(default_factory=Flags)

    def __post_init__(self):
        if self.cycles < 0:
            raise ValueError("cycles must be non-negative")
        if self.train_steps < 0 or self.validation_seeds < 1 or self.eval_seeds < 1:
            raise ValueError("budgets must be positive")
        self.env.validate()

    def to_dict(self) -> dict:
        return {
            "cycles": self.cycles,
            "seed": self.seed,
            "env": self.env.to_dict(),
            "dataset": self.dataset.to_dict(),
            "oracle": self.oracle.to_dict(),
            "ontology": dataclasses.asdict(self.ontology),
            "planner": dataclasses.asdict(self.planner),
            "agent": self.agent.to_dict(),
            "train_steps": self.train_steps,
            "validation_seeds": self.validation_seeds,
            "eval_seeds": self.eval_seeds,
            "sampled_eval": self.sampled_eval,
            "flags": dataclasses.asdict(self.flags),
        }

    @classmethod
    def from_dict(cls, d: Mapping[str, Any]) -> "PipelineConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        kw: dict[str, Any] = {k: d[k] for k in ("cycles", "seed", "train_steps", "validation_seeds",
                                                 "eval_seeds", "sampled_eval") if k in d}
        if "env" in d:
            kw["env"] = _section(E.EnvConfig, d["env"], "env")
        if "dataset" in d:
            kw["dataset"] = _section(GenConfig, d["dataset"], "dataset")
        if "oracle" in d:
            kw["oracle"] = _section(OracleConfig, d["oracle"], "oracle")
        if "ontology" in d:
            kw["ontology"] = _section(OntologySettings, d["ontology"], "ontology")
        if "planner" in d:
            kw["planner"] = _section(PlannerSettings, d["planner"], "planner")
        if "agent" in d:
            _section(A.PPOConfig, d["agent"], "agent", build=False)
            kw["agent"] = A.PPOConfig(**{**_desk_agent().to_dict(), **d["agent"]})
        if "flags" in d:
            kw["flags"] = _section(Flags, d["flags"], "flags")
        return cls(**kw)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(blob.encode()).hexdigest()[:16]

    def with_flags(self, **changes) -> "PipelineConfig":
        return dataclasses.replace(self, flags=dataclasses.replace(self.flags, **changes))

    def with_ablation(self, name: str) -> "PipelineConfig":
        return self.with_flags(**ABLATIONS[name])


def _section(cls, d: Mapping[str, Any], name: str, build: bool = True):
    unknown = set(d) - {f.name for f in dataclasses.fields(cls)}
    if unknown:
        raise ValueError(f"unknown {name} config keys: {sorted(unknown)}")
    return cls(**d) if build else None


def load_config(path) -> PipelineConfig:
    with open(path) as fh:
        return PipelineConfig.from_dict(json.load(fh))


def save_config(path, config: PipelineConfig) -> None:
    _write_json(path, config.to_dict())


# ---------------------------------------------------------------------------
# small IO helpers


def _write_json(path, obj) -> None:
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=1, sort_keys=True)
        fh.write("\n")


def _read_json(path):
    with open(path) as fh:
        return json.load(fh)


def _write_jsonl(path, records) -> None:
    with open(path, "w") as fh:
        for r in records:
            fh.write(json.dumps(r, sort_keys=True) + "\n")


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 16), b""):
            h.update(chunk)
    return h.hexdigest()


# ---------------------------------------------------------------------------
# run context


def stage_names(cycles: int) -> list[str]:
    names = ["data", "ontology", "plans", "sft"]
    for c in range(1, cycles + 1):
        names += [f"train-c{c}", f"validate-c{c}", f"dpo-c{c}", f"reprioritize-c{c}"]
    if cycles >= 1:
        names.append("eval")
    return names


class Run:
    """Artifact layout and stage bookkeeping for one output directory."""

    def __init__(self, config: PipelineConfig, out: str | os.PathLike):
        self.config = config
        self.out = Path(out)
        self.out.mkdir(parents=True, exist_ok=True)
        self.hash = config.config_hash()

    # paths
    def path(self, name: str) -> Path:
        return self.out / name

    @property
    def state_path(self) -> Path:
        return self.out / "stages.json"

    def completed(self) -> dict[str, list[str]]:
        if not self.state_path.exists():
            return {}
        doc = _read_json(self.state_path)
        if doc.get("config_hash") != self.hash:
            raise ValueError("output directory holds a run with a different configuration")
        return doc["stages"]

    def mark(self, stage: str, artifacts: Sequence[str]) -> None:
        stages = self.completed()
        stages[stage] = sorted(artifacts)
        order = {s: i for i, s in enumerate(stage_names(self.config.cycles))}
        stages = dict(sorted(stages.items(), key=lambda kv: order.get(kv[0], len(order))))
        _write_json(self.state_path, {"config_hash": self.hash, "stages": stages})
        self.write_manifest()

    def write_manifest(self) -> None:
        entries = []
        for stage, arts in self.completed().items():
            for a in arts:
                entries.append({"path": a, "stage": stage, "sha256": sha256_file(self.path(a))})
        entries.sort(key=lambda e: e["path"])
        _write_json(self.path("manifest.json"),
                    {"schema": METRICS_SCHEMA, "config_hash": self.hash, "artifacts": entries})

    # loaders
    def dataset(self) -> list[Instruction]:
        return load_dataset(self.path("dataset.jsonl"))

    def bank(self) -> O.SubtaskBank:
        return O.SubtaskBank(_read_json(self.path("bank.json"))["subtasks"])

    def goal_plans(self) -> dict[int, tuple[int, ...]]:
        doc = _read_json(self.path("goal_plans.json"))
        return {int(k): tuple(v) for k, v in doc["goal_plans"].items()}

    def pool(self, cycle: int) -> dict[int, list[O.ExpandedPlan]]:
        return O.load_plan_pool(self.path(f"plans_c{cycle}.jsonl"), self.bank())

    def planner(self, cycle: int) -> P.PlannerModel:
        name = "planner_sft.json" if cycle == 0 else f"planner_dpo_c{cycle}.json"
        return P.load_planner(self.path(name))

    def policy(self, cycle: int) -> A.PolicyParams:
        return A.load_policy(self.path(f"policy_c{cycle}.json"))

    def curriculum(self, cycle: int) -> A.CurriculumState:
        return A.CurriculumState.from_json(_read_json(self.path(f"curriculum_c{cycle}.json")))

    def report(self, cycle: int) -> V.ValidationReport:
        return V.ValidationReport.load_jsonl(self.path(f"validation_c{cycle}.jsonl"))

    # derived helpers
    def train_instructions(self) -> list[Instruction]:
        return [i for i in self.dataset() if i.split in TRAIN_SPLITS]

    def tasks(self, instructions, pool) -> list[A.PlanTask]:
        return A.make_tasks(instructions, pool, self.bank(), self.goal_plans(),
                            no_plan=self.config.flags.no_plan)

    def oracle(self) -> ScriptedOracle:
        oc = self.config.oracle
        return ScriptedOracle(dataclasses.replace(oc, seed=derive_seed(self.config.seed, "oracle", oc.seed)))

    def emb_size(self) -> int:
        return len(self.bank()) + 1


# ---------------------------------------------------------------------------
# stages


def stage_data(run: Run) -> list[str]:
    ds = generate_dataset(run.config.dataset, derive_seed(run.config.seed, "dataset"))
    save_dataset(run.path("dataset.jsonl"), ds)
    return ["dataset.jsonl"]


def stage_ontology(run: Run) -> list[str]:
    cfg = run.config
    bank, goal_plans = O.build_bank(run.dataset(), run.oracle())
    _write_json(run.path("bank.json"), {"subtasks": bank.items, "oversampling": O.oversampling(bank, 14)})
    _write_json(run.path("goal_plans.json"),
                {"goal_plans": {str(k): list(v) for k, v in sorted(goal_plans.items())}})
    arts = ["bank.json", "goal_plans.json"]
    if cfg.flags.ontology:
        oc = cfg.ontology
        graph = O.build_ontology(bank, run.oracle(), oc.n_queries, oc.tau_wilson, oc.z,
                                 accumulate_passes=oc.accumulate_passes)
        O.save_ontology(run.path("ontology.json"), graph)
        arts.append("ontology.json")
    return arts


def stage_plans(run: Run) -> list[str]:
    graph = O.load_ontology(run.path("ontology.json")) if run.config.flags.ontology else None
    pool = O.expand_all(run.goal_plans(), graph, run.config.ontology.max_variants)
    O.save_plan_pool(run.path("plans_c0.jsonl"), pool, run.bank().items)
    return ["plans_c0.jsonl"]


def stage_sft(run: Run) -> list[str]:
    pc = run.config.planner
    fz = P.PlanFeaturizer(len(run.bank()), pc.pair_cap)
    model = P.PlannerModel.init(fz, derive_seed(run.config.seed, "planner"), pc.init_scale)
    history: list[float] = []
    if run.config.flags.sft:
        groups = P.build_groups(fz, run.pool(0), run.goal_plans())
        model, history = P.sft_fit(model, groups, pc.sft_epochs, pc.sft_lr)
    P.save_planner(run.path("planner_sft.json"), model)
    _write_json(run.path("sft_log.json"), {"loss": history})
    return ["planner_sft.json", "sft_log.json"]


def stage_train(run: Run, cycle: int) -> list[str]:
    cfg = run.config
    pool = run.pool(cycle - 1)
    tasks = run.tasks(run.train_instructions(), pool)
    if cfg.agent.plan_sampling == "score":
        nlls = P.nll_table(run.planner(cycle - 1), pool, run.goal_plans())
        tasks = A.weight_tasks(tasks, {k: math.exp(-v) for k, v in nlls.items()})
    if cycle == 1:
        params = A.init_policy(cfg.env.observation_size, run.emb_size(), cfg.agent.hidden,
                               derive_seed(cfg.seed, "policy"))
        cur = None
    else:
        params = run.policy(cycle - 1)
        cur = run.curriculum(cycle - 1)
        cur.active = A.active_set(tasks, cur.mastered, cur.enabled)
    if cur is None:
        cur = A.init_curriculum(tasks, cfg.flags.curriculum, cfg.agent.skill_window)
    mode = A.TrainMode(cfg.flags.curriculum, cfg.flags.no_plan, cfg.flags.auto_done)
    res = A.run_training(params, tasks, cfg.env, cfg.agent, cfg.train_steps, mode,
                         derive_seed(cfg.seed, "train", cycle), cur)
    A.save_policy(run.path(f"policy_c{cycle}.json"), res.params)
    _write_json(run.path(f"curriculum_c{cycle}.json"), res.curriculum.to_json())
    _write_jsonl(run.path(f"train_log_c{cycle}.jsonl"), res.log)
    return [f"policy_c{cycle}.json", f"curriculum_c{cycle}.json", f"train_log_c{cycle}.jsonl"]


def stage_validate(run: Run, cycle: int) -> list[str]:
    cfg = run.config
    tasks = run.tasks(run.train_instructions(), run.pool(cycle - 1))
    seeds = V.validation_seeds(cfg.seed, cfg.validation_seeds)
    report = V.validate_plans(run.policy(cycle), tasks, cfg.env, seeds,
                              greedy=not cfg.sampled_eval, auto_done=cfg.flags.auto_done,
                              embedding_scale=cfg.agent.embedding_scale,
                              sample_seed=derive_seed(cfg.seed, "validation-actions", cycle))
    report.save_jsonl(run.path(f"validation_c{cycle}.jsonl"))
    report.save_split_csv(run.path(f"validation_c{cycle}.csv"))
    return [f"validation_c{cycle}.jsonl", f"validation_c{cycle}.csv"]


def stage_dpo(run: Run, cycle: int) -> list[str]:
    cfg, pc = run.config, run.config.planner
    prev = run.planner(cycle - 1)
    pairs = V.build_preference_pairs(run.report(cycle), pc.margin) if not cfg.flags.no_plan else []
    P.save_pairs(run.path(f"pairs_c{cycle}.jsonl"), pairs)
    history: list[float] = []
    model = prev.copy()
    model.version = prev.version + 1
    if cfg.flags.dpo and pairs:
        groups = P.build_groups(prev.featurizer, run.pool(cycle - 1), run.goal_plans())
        model, history = P.dpo_update(prev, pairs, groups, pc.beta, pc.dpo_lr, pc.dpo_epochs)
    P.save_planner(run.path(f"planner_dpo_c{cycle}.json"), model)
    _write_json(run.path(f"dpo_log_c{cycle}.json"), {"loss": history, "n_pairs": len(pairs)})
    return [f"pairs_c{cycle}.jsonl", f"planner_dpo_c{cycle}.json", f"dpo_log_c{cycle}.json"]


def stage_reprioritize(run: Run, cycle: int) -> list[str]:
    model = run.planner(cycle)
    pool = P.reprioritize(model, run.pool(cycle - 1), run.goal_plans(), run.config.planner.top_k)
    O.save_plan_pool(run.path(f"plans_c{cycle}.jsonl"), pool, run.bank().items)
    return [f"plans_c{cycle}.jsonl"]


def stage_eval(run: Run) -> list[str]:
    cfg = run.config
    last = cfg.cycles
    pool = run.pool(last)
    top = {iid: plans[:1] for iid, plans in pool.items()}
    tasks = run.tasks(run.dataset(), top)
    seeds = V.validation_seeds(cfg.seed, cfg.eval_seeds, stream="eval")
    report = V.validate_plans(run.policy(last), tasks, cfg.env, seeds,
                              greedy=not cfg.sampled_eval, auto_done=cfg.flags.auto_done,
                              embedding_scale=cfg.agent.embedding_scale,
                              sample_seed=derive_seed(cfg.seed, "eval-actions"))
    report.save_jsonl(run.path("eval.jsonl"))
    report.save_split_csv(run.path("eval_by_split.csv"))
    arts = ["eval.jsonl", "eval_by_split.csv"]
    per_cycle = []
    for c in range(1, last + 1):
        cur = run.curriculum(c)
        per_cycle.append({"cycle": c, "mastered_count": len(cur.mastered),
                          "validation_sr_by_split": run.report(c).split_sr()})
    metrics = {
        "schema": METRICS_SCHEMA,
        "config_hash": run.hash,
        "sr_by_split": report.split_sr(),
        "cycles": per_cycle,
    }
    if last >= 1 and not cfg.flags.no_plan:
        ckpts = [("sft", run.planner(0))] + [(f"dpo_c{c}", run.planner(c)) for c in range(1, last + 1)]
        table = export_rank_table(ckpts, run.pool(0), run.goal_plans(), run.report(1))
        table.save_csv(run.path("rank_table.csv"))
        # JSON has no NaN; an undefined correlation is written as null
        metrics["spearman"] = {k: None if math.isnan(v) else v for k, v in table.spearman.items()}
        arts.append("rank_table.csv")
    _write_json(run.path("metrics.json"), metrics)
    arts.append("metrics.json")
    return arts


def _stage_fn(name: str) -> Callable[[Run], list[str]]:
    if name == "data":
        return stage_data
    if name == "ontology":
        return stage_ontology
    if name == "plans":
        return stage_plans
    if name == "sft":
        return stage_sft
    if name == "eval":
        return stage_eval
    kind, _, c = name.rpartition("-c")
    fns = {"train": stage_train, "validate": stage_validate, "dpo": stage_dpo,
           "reprioritize": stage_reprioritize}
    if kind not in fns or not c.isdigit():
        raise ValueError(f"unknown stage {name!r}")
    return lambda run: fns[kind](run, int(c))


def run_stage(run: Run, name: str) -> list[str]:
    if name not in stage_names(run.config.cycles):
        raise ValueError(f"stage {name!r} is not part of a {run.config.cycles}-cycle run")
    log.info("stage %s", name)
    try:
        arts = _stage_fn(name)(run)
    except Exception as exc:
        raise StageError(name, exc) from exc
    run.mark(name, arts)
    return arts


def run_pipeline(
    config: PipelineConfig,
    out: str | os.PathLike,
    *,
    resume: bool = False,
    stop_after: str | None = None,
) -> dict[str, list[str]]:
    """Execute all stages in order under an exclusive directory lock."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise LockedError(f"another process is using {out}") from None
    try:
        run = Run(config, out)
        if not resume and run.state_path.exists():
            run.state_path.unlink()
        save_config(run.path("config.json"), config)
        done = run.completed()
        names = stage_names(config.cycles)
        if stop_after is not None and stop_after not in names:
            raise ValueError(f"unknown stage {stop_after!r}")
        for name in names:
            if name not in done:
                run_stage(run, name)
            if name == stop_after:
                break
        run.write_manifest()
        return run.completed()
    finally:
        lock.release()


# ---------------------------------------------------------------------------
# rank tables


@dataclass
class RankTable:
    checkpoints: list[str]
    rows: list[dict]
    spearman: dict[str, float]

    def save_csv(self, path) -> None:
        cols = ["instruction_id", "variant", "sr"] + [f"rank_{c}" for c in self.checkpoints] \
            + [f"nll_{c}" for c in self.checkpoints]
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(cols)
            for r in self.rows:
                w.writerow([r[c] if not isinstance(r[c], float) else f"{r[c]:.6f}" for c in cols])
            w.writerow([])
            w.writerow(["checkpoint", "spearman"])
            for c in self.checkpoints:
                w.writerow([c, f"{self.spearman[c]:.6f}"])


def mean_spearman(
    scores: Mapping[tuple[int, int], float], sr: Mapping[tuple[int, int], float]
) -> float:
    """Average per-instruction rank correlation of ``scores`` with ``sr``.

    Instructions with a single variant, or where either side is constant,
    have no defined correlation and are skipped. NaN if none remain.
    """
    by_ins: dict[int, list[tuple[int, int]]] = {}
    for key in sr:
        if key in scores:
            by_ins.setdefault(key[0], []).append(key)
    vals = []
    for iid in sorted(by_ins):
        keys = sorted(by_ins[iid])
        a = np.array([scores[k] for k in keys])
        b = np.array([sr[k] for k in keys])
        if len(keys) < 2 or np.ptp(a) == 0 or np.ptp(b) == 0:
            continue
        vals.append(float(spearmanr(a, b)[0]))
    return float(np.mean(vals)) if vals else math.nan


def export_rank_table(
    checkpoints: Sequence[tuple[str, P.PlannerModel]],
    pool: Mapping[int, Sequence[O.ExpandedPlan]],
    goal_plans: Mapping[int, Sequence[int]],
    report: V.ValidationReport,
) -> RankTable:
    """Per-variant NLL ranks under each checkpoint beside validated SR."""
    if len(checkpoints) < 2:
        raise ValueError("need at least two planner checkpoints")
    sr = report.sr_map()
    validated = {iid: [p for p in plans if (iid, p.variant) in sr] for iid, plans in pool.items()}
    validated = {k: v for k, v in validated.items() if v}
    names = [n for n, _ in checkpoints]
    nlls = {n: P.nll_table(m, validated, goal_plans) for n, m in checkpoints}
    rows = []
    for iid in sorted(validated):
        keys = [(iid, p.variant) for p in validated[iid]]
        ranks = {}
        for n in names:
            order = sorted(keys, key=lambda k: (nlls[n][k], k[1]))
            ranks[n] = {k: i + 1 for i, k in enumerate(order)}
        for k in sorted(keys, key=lambda k: k[1]):
            row = {"instruction_id": iid, "variant": k[1], "sr": sr[k]}
            for n in names:
                row[f"rank_{n}"] = ranks[n][k]
                row[f"nll_{n}"] = nlls[n][k]
            rows.append(row)
    spearman = {n: mean_spearman({k: -v for k, v in nlls[n].items()}, sr) for n in names}
    return RankTable(names, rows, spearman)
