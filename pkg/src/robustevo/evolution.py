"""(1+lambda) evolutionary strategy over two-level genomes.

A generation mutates the parent into ``lam`` offspring, evaluates them
(train from scratch, then score), updates the warm-up controller and
selects the next parent.  Generation 0 evaluates the initial population.
Each generation ends with a checkpoint so an interrupted run resumes
bitwise-identically (single-threaded).
"""
from __future__ import annotations

import csv
import hashlib
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field, fields
from fractions import Fraction
from pathlib import Path
from typing import NamedTuple

import numpy as np
import torch

from .attacks import ThreatModel
from .data import Dataset
from .engine import OptimizerConfig, TrainConfig, TrainReport, train
from .fitness import (PENALTY, RUNLOG_COLUMNS, FitnessReport, WarmupController, evaluate_individual,
                      fgsm_attack, runlog_row, update_warmup)
from .genome import (DESK_MODULES, PAPER_MODULES, Genome, RepairError, Unit, decode_genome,
                     random_genome, repair_dead_ends, seed_genome, validate, window)
from .grammar import Grammar, derive, load_grammar, mutate_choice, perturb_float
from .netbuilder import PlanError, build, check_plan

RUN_STATE_VERSION = 1
SUMMARY_COLUMNS = ["generation", "regime", "best_F", "mean_F", "parent_F", "best_C", "best_A",
                   "n_evaluated", "n_trained", "transition_after"]

TABLE1_RATES = {
    "add_layer": 0.25, "replicate_layer": 0.35, "remove_layer": 0.25,
    "add_conn": 0.15, "remove_conn": 0.15,
    "dsge_layer": 0.15, "dsge_learning": 0.30, "train_time": 0.10,
}


@dataclass
class EvolutionConfig:
    lam: int = 4
    generations: int = 100
    rates: dict = field(default_factory=lambda: dict(TABLE1_RATES))
    mu: float = 0.0
    sigma: float = 0.15
    budget_default: int = 2000
    budget_max: int = 6000
    budget_increment: int = 2000
    budget_mode: str = "steps"
    tau: float = 0.80
    beta: float = 4.0
    seed_mode: str = "seeded"  # seeded | random
    rng_seed: int = 0
    variant: str = "neronet"  # module layout, grammar and seed: neronet | desk
    grammar: str | None = None  # path overriding the variant's bundled grammar
    epsilon: str = "8/255"
    attack_batch: int = 128
    l2_coeff: float = 5e-4
    augment: bool = True
    fair_comparison: bool = True
    rescore_parent_at_flip: bool = False
    warmup_includes_penalized: bool = True

    def __post_init__(self):
        unknown = set(self.rates) - set(TABLE1_RATES)
        if unknown:
            raise ValueError(f"unknown mutation rates: {sorted(unknown)}")
        self.rates = {**TABLE1_RATES, **self.rates}
        if any(not 0 <= r <= 1 for r in self.rates.values()):
            raise ValueError("mutation rates must lie in [0, 1]")
        if self.lam < 1 or self.generations < 1:
            raise ValueError("lam and generations must be >= 1")
        if not 0 < self.budget_default <= self.budget_max or self.budget_increment <= 0:
            raise ValueError("need 0 < budget_default <= budget_max and budget_increment > 0")
        if self.seed_mode not in ("seeded", "random"):
            raise ValueError("seed_mode must be 'seeded' or 'random'")
        if self.variant not in ("neronet", "desk"):
            raise ValueError("variant must be 'neronet' or 'desk'")
        parse_epsilon(self.epsilon)

    @property
    def specs(self):
        return PAPER_MODULES if self.variant == "neronet" else DESK_MODULES

    @property
    def budget_bounds(self):
        return (self.budget_default, self.budget_max)

    def load_grammar(self) -> Grammar:
        return load_grammar(self.grammar or self.variant)

    def threat_model(self) -> ThreatModel:
        return ThreatModel("Linf", parse_epsilon(self.epsilon))

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "EvolutionConfig":
        names = {f.name for f in fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def hash(self) -> str:
        """Identity of a run; ``generations`` is excluded so a resumed run may be extended."""
        d = self.to_dict()
        d.pop("generations")
        return hashlib.sha256(json.dumps(d, sort_keys=True).encode()).hexdigest()[:16]


def parse_epsilon(text) -> float:
    """'8/255' or '0.03' parsed as an exact rational, converted to float once."""
    value = Fraction(str(text).strip())
    if value <= 0:
        raise ValueError("epsilon must be > 0")
    return float(value)


@dataclass
class Individual:
    genome: Genome
    fitness: FitnessReport | None = None
    plan_hash: str | None = None
    evaluated_budget: int | None = None
    train_report: TrainReport | None = None
    state: dict | None = None  # trained weights (kept for the parent only)

    def F(self) -> float:
        return PENALTY if self.fitness is None else self.fitness.F


class DataBundle(NamedTuple):
    train: Dataset
    control: Dataset
    fitness: Dataset


# -- mutation ------------------------------------------------------------------

def _spec_for(g: Genome, module):
    return g.spec(module)


def _heal(g: Genome, rng) -> None:
    """Restore per-unit connection invariants after a structural change.

    Non-skip units are re-chained to their predecessor; skip units drop
    inputs that fell outside their window and fall back to the predecessor
    if none remain.
    """
    for i, u in enumerate(g.layer_units):
        spec = _spec_for(g, u.module)
        if not spec.allow_skip:
            u.inputs = [i - 1]
            continue
        allowed = set(window(i, spec.levels_back))
        kept = sorted(set(s for s in u.inputs if s in allowed))
        u.inputs = kept or [i - 1]


def _insert(g: Genome, pos: int, unit: Unit, rng) -> None:
    for u in g.layer_units:
        u.inputs = [s + 1 if s >= pos else s for s in u.inputs]
    spec = _spec_for(g, unit.module)
    if spec.allow_skip:
        cands = window(pos, spec.levels_back)
        k = int(rng.integers(1, len(cands) + 1))
        unit.inputs = sorted(cands[i] for i in rng.choice(len(cands), size=k, replace=False))
    else:
        unit.inputs = [pos - 1]
    g.layer_units.insert(pos, unit)
    _heal(g, rng)


def _remove(g: Genome, pos: int, rng) -> None:
    del g.layer_units[pos]
    for u in g.layer_units:
        u.inputs = [s - 1 if s > pos else s for s in u.inputs if s != pos]
    _heal(g, rng)


def _open_modules(g: Genome):
    counts = g.counts()
    return [s for s in g.specs if counts[s.nonterminal] < s.max_units]


def add_layer(g: Genome, grammar: Grammar, rng) -> bool:
    open_mods = _open_modules(g)
    if not open_mods:
        return False
    spec = open_mods[int(rng.integers(len(open_mods)))]
    r = g.module_range(spec.nonterminal)
    pos = int(rng.integers(r.start, r.stop + 1))
    _insert(g, pos, Unit(spec.nonterminal, derive(grammar, spec.nonterminal, rng), []), rng)
    return True


def replicate_layer(g: Genome, rng) -> bool:
    open_names = {s.nonterminal for s in _open_modules(g)}
    cands = [i for i, u in enumerate(g.layer_units) if u.module in open_names]
    if not cands:
        return False
    src = g.layer_units[cands[int(rng.integers(len(cands)))]]
    r = g.module_range(src.module)
    pos = int(rng.integers(r.start, r.stop + 1))
    _insert(g, pos, Unit(src.module, src.inner.copy(), []), rng)
    return True


def remove_layer(g: Genome, rng) -> bool:
    counts = g.counts()
    cands = [i for i, u in enumerate(g.layer_units) if counts[u.module] > g.spec(u.module).min_units]
    if not cands:
        return False
    _remove(g, cands[int(rng.integers(len(cands)))], rng)
    return True


def _skip_units(g: Genome):
    return [i for i, u in enumerate(g.layer_units) if g.spec(u.module).allow_skip]


def add_connection(g: Genome, rng) -> bool:
    units = _skip_units(g)
    if not units:
        return False
    i = units[int(rng.integers(len(units)))]
    u = g.layer_units[i]
    free = [s for s in window(i, g.spec(u.module).levels_back) if s not in u.inputs]
    if not free:
        return False
    u.inputs = sorted(u.inputs + [free[int(rng.integers(len(free)))]])
    return True


def remove_connection(g: Genome, rng) -> bool:
    units = _skip_units(g)
    if not units:
        return False
    u = g.layer_units[units[int(rng.integers(len(units)))]]
    if len(u.inputs) < 2:
        return False
    drop = int(rng.integers(len(u.inputs)))
    u.inputs = [s for k, s in enumerate(u.inputs) if k != drop]
    return True


def dsge_mutation(grammar: Grammar, inner, rng, mu=0.0, sigma=0.15):
    """Either re-draw a derivation choice or perturb a parameter, with equal odds."""
    if rng.random() < 0.5:
        return mutate_choice(grammar, inner, rng)
    return perturb_float(grammar, inner, rng, mu, sigma)


def mutate_budget(budget: int, cfg: EvolutionConfig) -> int:
    if budget >= cfg.budget_max:
        return cfg.budget_default
    return min(budget + cfg.budget_increment, cfg.budget_max)


def mutate(parent: Genome, cfg: EvolutionConfig, grammar: Grammar, rng: np.random.Generator,
           max_tries: int = 10) -> Genome:
    """Offspring genome; each operator fires independently with its configured rate."""
    rates = cfg.rates
    for _ in range(max_tries):
        g = parent.copy()
        if rng.random() < rates["add_layer"]:
            add_layer(g, grammar, rng)
        if rng.random() < rates["replicate_layer"]:
            replicate_layer(g, rng)
        if rng.random() < rates["remove_layer"]:
            remove_layer(g, rng)
        if rng.random() < rates["add_conn"]:
            add_connection(g, rng)
        if rng.random() < rates["remove_conn"]:
            remove_connection(g, rng)
        for u in g.layer_units:
            if rng.random() < rates["dsge_layer"]:
                u.inner = dsge_mutation(grammar, u.inner, rng, cfg.mu, cfg.sigma)
        if rng.random() < rates["dsge_learning"]:
            g.learning_unit = dsge_mutation(grammar, g.learning_unit, rng, cfg.mu, cfg.sigma)
        if rng.random() < rates["train_time"]:
            g.budget = mutate_budget(g.budget, cfg)
        try:
            g = repair_dead_ends(g, rng)
        except RepairError:
            continue
        problems = validate(g, cfg.budget_bounds)
        if not problems:
            return g
    return parent.copy()


def init_population(cfg: EvolutionConfig, grammar: Grammar, rng: np.random.Generator) -> list[Genome]:
    """``lam`` genomes: the seed plus ``lam - 1`` mutants of it, or ``lam`` random genomes."""
    if cfg.seed_mode == "random":
        return [random_genome(cfg.specs, grammar, rng, cfg.budget_default) for _ in range(cfg.lam)]
    seed = seed_genome(cfg.variant, rng=rng, budget=cfg.budget_default)
    return [seed] + [mutate(seed, cfg, grammar, rng) for _ in range(cfg.lam - 1)]


# -- evaluation ----------------------------------------------------------------

def eval_seed(rng_seed: int, generation: int, index: int, retrain: int = 0) -> int:
    ss = np.random.SeedSequence([rng_seed, generation, index, retrain])
    return int(ss.generate_state(1, dtype=np.uint32)[0])


class TrainingEvaluator:
    """Train a genome from scratch on the evolutionary split and score it."""

    def __init__(self, data: DataBundle, grammar: Grammar, cfg: EvolutionConfig):
        self.data = data
        self.grammar = grammar
        self.cfg = cfg
        self.tm = cfg.threat_model()
        self.attack = fgsm_attack(cfg.attack_batch)

    def _build(self, genome, seed):
        plan = decode_genome(genome, self.grammar, self.data.train.shape)
        reason = check_plan(plan, self.data.train.n_classes)
        if reason is not None:
            return plan, None
        return plan, build(plan, self.data.train.n_classes, seed=seed)

    def evaluate(self, genome: Genome, warmup: WarmupController, seed: int) -> Individual:
        plan, net = self._build(genome, seed)
        if net is None:
            rep = evaluate_individual(None, self.data.fitness, self.cfg.beta, self.attack, self.tm,
                                      warmup, None, invalid_plan=True)
            return Individual(genome, rep, plan.hash, genome.budget)
        oc = OptimizerConfig.from_attrs(plan.metadata)
        tc = TrainConfig.from_attrs(plan.metadata, budget=genome.budget, budget_mode=self.cfg.budget_mode,
                                    l2_coeff=self.cfg.l2_coeff, augment=self.cfg.augment, rng_seed=seed)
        report = train(net, self.data.train, self.data.control, tc, oc)
        fit = evaluate_individual(net, self.data.fitness, self.cfg.beta, self.attack, self.tm, warmup, report)
        state = {k: v.detach().clone() for k, v in net.state_dict().items()}
        return Individual(genome, fit, plan.hash, genome.budget, report, state)

    def rescore(self, ind: Individual, warmup: WarmupController) -> FitnessReport:
        """Score stored weights under the current regime (no training)."""
        if ind.state is None or ind.fitness.penalized:
            return FitnessReport(**{**ind.fitness.to_dict(), "regime": warmup.regime})
        _, net = self._build(ind.genome, 0)
        net.load_state_dict(ind.state)
        return evaluate_individual(net, self.data.fitness, self.cfg.beta, self.attack, self.tm, warmup,
                                   ind.train_report)


def _same_phenotype(a: Individual, b: Genome, grammar: Grammar) -> bool:
    try:
        ph = decode_genome(b, grammar, (1, 1, 1)).hash == decode_genome(a.genome, grammar, (1, 1, 1)).hash
    except PlanError:
        return False
    return ph and a.genome.learning_unit.to_dict() == b.learning_unit.to_dict() and a.genome.budget == b.budget


def select(parent: Individual | None, offspring: list, evaluator, warmup: WarmupController, cfg: EvolutionConfig,
           generation: int, retrains: list | None = None) -> Individual:
    """Best of parent + offspring; ties keep the incumbent, then the lowest index.

    A winning challenger trained with a smaller budget than the incumbent is
    re-trained once at the incumbent's budget before the final comparison.
    """
    best, best_idx = parent, -1
    for k, o in enumerate(offspring):
        if best is None or o.F() > best.F():
            best, best_idx = o, k
    if parent is None or best is parent:
        return best
    if cfg.fair_comparison and best.evaluated_budget < parent.evaluated_budget:
        g = best.genome.copy()
        g.budget = parent.evaluated_budget
        again = evaluator.evaluate(g, warmup, eval_seed(cfg.rng_seed, generation, best_idx, 1))
        if retrains is not None:
            retrains.append({**runlog_row(generation, best_idx + 1, again.fitness, g.budget),
                             "original_budget": best.evaluated_budget, "original_F": repr(best.F())})
        best = again
        if not best.F() > parent.F():
            return parent
    return best


# -- run state -------------------------------------------------------------------

@dataclass
class RunState:
    generation: int = -1  # last completed generation
    parent: Individual | None = None
    warmup: WarmupController = field(default_factory=WarmupController)
    rng: np.random.Generator = field(default_factory=np.random.default_rng)
    rows: list = field(default_factory=list)
    summary: list = field(default_factory=list)
    retrains: list = field(default_factory=list)


def _ind_to_json(ind: Individual) -> dict:
    return {"genome": ind.genome.to_dict(), "fitness": ind.fitness.to_dict(), "plan_hash": ind.plan_hash,
            "evaluated_budget": ind.evaluated_budget,
            "train_report": None if ind.train_report is None else ind.train_report.to_dict()}


def _ind_from_json(d: dict, state) -> Individual:
    return Individual(Genome.from_dict(d["genome"]), FitnessReport.from_dict(d["fitness"]), d["plan_hash"],
                      d["evaluated_budget"],
                      None if d["train_report"] is None else TrainReport.from_dict(d["train_report"]), state)


def save_run_state(path, st: RunState, cfg: EvolutionConfig) -> None:
    meta = {
        "version": RUN_STATE_VERSION, "config_hash": cfg.hash(), "config": cfg.to_dict(),
        "generation": st.generation, "parent": _ind_to_json(st.parent),
        "warmup": asdict(st.warmup), "rng": st.rng.bit_generator.state,
        "rows": st.rows, "summary": st.summary, "retrains": st.retrains,
    }
    tmp = Path(str(path) + ".tmp")
    torch.save({"meta": json.dumps(meta), "parent_state": st.parent.state or {}}, tmp)
    tmp.replace(path)


def load_run_state(path, cfg: EvolutionConfig) -> RunState:
    try:
        blob = torch.load(path, map_location="cpu", weights_only=True)
        meta = json.loads(blob["meta"])
    except Exception as exc:  # noqa: BLE001 - any decoding failure means a corrupt file
        raise ValueError(f"corrupt checkpoint {path}: {exc}") from exc
    if meta.get("version") != RUN_STATE_VERSION:
        raise ValueError(f"checkpoint version {meta.get('version')!r} != {RUN_STATE_VERSION}")
    if meta["config_hash"] != cfg.hash():
        raise ValueError("checkpoint was written with a different configuration (config-hash mismatch)")
    rng = np.random.default_rng()
    rng.bit_generator.state = meta["rng"]
    return RunState(meta["generation"], _ind_from_json(meta["parent"], blob["parent_state"] or None),
                    WarmupController(**meta["warmup"]), rng, meta["rows"], meta["summary"], meta["retrains"])


# -- logs -------------------------------------------------------------------------

def summarize_generation(generation: int, regime: str, rows: list) -> dict:
    """Per-generation summary from run-log rows; best values use rows scored in ``regime``."""
    cur = [r for r in rows if r["regime"] == regime] or rows
    Fs = [float(r["F"]) for r in cur]
    As = [float(r["A"]) for r in cur if r["A"] != ""]
    return {"generation": generation, "regime": regime, "best_F": repr(max(Fs)),
            "mean_F": repr(float(np.mean([float(r["F"]) for r in rows]))),
            "best_C": repr(max(float(r["C"]) for r in cur)), "best_A": repr(max(As)) if As else ""}


def _write_csv(path, rows, columns):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=columns, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def write_logs(out: Path, st: RunState) -> None:
    _write_csv(out / "runlog.csv", st.rows, RUNLOG_COLUMNS)
    _write_csv(out / "summary.csv", st.summary, SUMMARY_COLUMNS)
    _write_csv(out / "retrains.csv", st.retrains, RUNLOG_COLUMNS + ["original_budget", "original_F"])


# -- the loop -----------------------------------------------------------------------

def _evaluate_all(genomes, parent, evaluator, warmup, cfg, generation, grammar, jobs):
    """Evaluate a generation; offspring identical to the parent reuse its report."""
    out: list = [None] * len(genomes)
    todo = []
    for k, g in enumerate(genomes):
        if (parent is not None and parent.fitness is not None and parent.fitness.regime == warmup.regime
                and _same_phenotype(parent, g, grammar)):
            out[k] = Individual(g, parent.fitness, parent.plan_hash, parent.evaluated_budget,
                                parent.train_report, parent.state)
        else:
            todo.append(k)

    def work(k):
        return evaluator.evaluate(genomes[k], warmup, eval_seed(cfg.rng_seed, generation, k))

    if jobs > 1 and len(todo) > 1:
        with ThreadPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(work, todo))
    else:
        results = [work(k) for k in todo]
    for k, res in zip(todo, results):
        out[k] = res
    return out, len(todo)


def run(cfg: EvolutionConfig, data: DataBundle | None = None, out_dir=None, evaluator=None,
        resume: bool = False, jobs: int = 1, stop_after: int | None = None, log=None) -> RunState:
    """Run (or resume) evolution; ``stop_after`` ends early after that generation (for tests)."""
    grammar = cfg.load_grammar()
    if evaluator is None:
        evaluator = TrainingEvaluator(data, grammar, cfg)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    ckpt = out / "checkpoint.pt" if out is not None else None

    if resume and ckpt is not None and ckpt.exists():
        st = load_run_state(ckpt, cfg)
    else:
        st = RunState(warmup=WarmupController(cfg.tau, False, cfg.warmup_includes_penalized),
                      rng=np.random.default_rng(cfg.rng_seed))

    while st.generation + 1 < cfg.generations:
        gen = st.generation + 1
        if gen == 0:
            genomes = init_population(cfg, grammar, st.rng)
        else:
            genomes = [mutate(st.parent.genome, cfg, grammar, st.rng) for _ in range(cfg.lam)]
        regime_ctrl = st.warmup
        if (cfg.rescore_parent_at_flip and st.parent is not None
                and st.parent.fitness.regime != regime_ctrl.regime):
            st.parent.fitness = evaluator.rescore(st.parent, regime_ctrl)
        offspring, n_trained = _evaluate_all(genomes, st.parent, evaluator, regime_ctrl, cfg, gen, grammar, jobs)

        gen_rows = []
        if st.parent is not None:
            gen_rows.append(runlog_row(gen, 0, st.parent.fitness, st.parent.evaluated_budget))
        gen_rows += [runlog_row(gen, k + 1, o.fitness, o.evaluated_budget) for k, o in enumerate(offspring)]
        population = ([st.parent] if st.parent is not None else []) + offspring
        st.warmup = update_warmup(regime_ctrl, [p.fitness for p in population])
        new_parent = select(st.parent, offspring, evaluator, regime_ctrl, cfg, gen, st.retrains)
        if new_parent is not st.parent:
            new_parent = Individual(new_parent.genome, new_parent.fitness, new_parent.plan_hash,
                                    new_parent.evaluated_budget, new_parent.train_report, new_parent.state)
        st.parent = new_parent

        summ = summarize_generation(gen, regime_ctrl.regime, gen_rows)
        summ.update(parent_F=repr(st.parent.F()), n_evaluated=len(offspring), n_trained=n_trained,
                    transition_after=int(st.warmup.transitioned and not regime_ctrl.transitioned))
        st.rows += gen_rows
        st.summary.append(summ)
        st.generation = gen
        if log is not None:
            log(f"gen {gen:3d} regime={summ['regime']:6s} best_F={float(summ['best_F']):.4f} "
                f"parent_F={st.parent.F():.4f} trained={n_trained}")
        if out is not None:
            save_run_state(ckpt, st, cfg)
            write_logs(out, st)
            (out / "best_genome.json").write_text(st.parent.genome.dumps() + "\n")
        if stop_after is not None and gen >= stop_after:
            break
    return st
