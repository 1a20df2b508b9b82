"""Outer-level genome: modules of layer units with explicit input connections."""
from __future__ import annotations

import json
from dataclasses import dataclass
from importlib import resources
from pathlib import Path

import numpy as np

from .grammar import Grammar, InnerGenotype, decode, derive, load_grammar
from .netbuilder import NetworkPlan, descriptor_from_attrs

GENOME_FORMAT = 1
LEARNING_NT = "learning"


class RepairError(RuntimeError):
    """A dead end has no valid successor to connect to."""


@dataclass(frozen=True)
class ModuleSpec:
    nonterminal: str
    min_units: int
    max_units: int
    allow_skip: bool = False
    levels_back: int = 1

    def __post_init__(self):
        if self.min_units < 0 or self.max_units < 1 or self.min_units > self.max_units:
            raise ValueError(f"bad unit bounds for {self.nonterminal}")
        if self.levels_back < 1:
            raise ValueError("levels_back must be >= 1")

    def to_list(self):
        return [self.nonterminal, self.min_units, self.max_units, self.allow_skip, self.levels_back]


PAPER_MODULES = (
    ModuleSpec("stem", 0, 1, False, 1),
    ModuleSpec("features", 1, 30, True, 5),
    ModuleSpec("last-transition", 0, 1, False, 1),
    ModuleSpec("classification", 0, 5, False, 1),
    ModuleSpec("softmax", 1, 1, False, 1),
)

DESK_MODULES = (
    ModuleSpec("stem", 0, 1, False, 1),
    ModuleSpec("features", 1, 10, True, 5),
    ModuleSpec("last-transition", 0, 1, False, 1),
    ModuleSpec("classification", 0, 2, False, 1),
    ModuleSpec("softmax", 1, 1, False, 1),
)


@dataclass
class Unit:
    module: str
    inner: InnerGenotype
    inputs: list

    def copy(self):
        return Unit(self.module, self.inner.copy(), list(self.inputs))


@dataclass
class Genome:
    specs: tuple
    layer_units: list
    learning_unit: InnerGenotype
    budget: int
    learning_nt: str = LEARNING_NT

    def copy(self) -> "Genome":
        return Genome(self.specs, [u.copy() for u in self.layer_units], self.learning_unit.copy(),
                      self.budget, self.learning_nt)

    def spec(self, module: str) -> ModuleSpec:
        for s in self.specs:
            if s.nonterminal == module:
                return s
        raise KeyError(module)

    def spec_of(self, index: int) -> ModuleSpec:
        return self.spec(self.layer_units[index].module)

    def module_range(self, module: str) -> range:
        idx = [i for i, u in enumerate(self.layer_units) if u.module == module]
        if idx:
            return range(idx[0], idx[-1] + 1)
        # empty module: the insertion point after the preceding modules
        order = [s.nonterminal for s in self.specs]
        pos = order.index(module)
        start = sum(1 for u in self.layer_units if order.index(u.module) < pos)
        return range(start, start)

    def counts(self) -> dict:
        out = {s.nonterminal: 0 for s in self.specs}
        for u in self.layer_units:
            out[u.module] = out.get(u.module, 0) + 1
        return out

    # -- serialization --
    def to_dict(self) -> dict:
        return {
            "format": GENOME_FORMAT,
            "modules": [s.to_list() for s in self.specs],
            "units": [{"module": u.module, "inputs": list(u.inputs), "inner": u.inner.to_dict()}
                      for u in self.layer_units],
            "learning": self.learning_unit.to_dict(),
            "learning_nt": self.learning_nt,
            "budget": self.budget,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Genome":
        if d.get("format") != GENOME_FORMAT:
            raise ValueError(f"unsupported genome format {d.get('format')!r}")
        specs = tuple(ModuleSpec(n, int(lo), int(hi), bool(skip), int(lb)) for n, lo, hi, skip, lb in d["modules"])
        units = [Unit(u["module"], InnerGenotype.from_dict(u["inner"]), [int(i) for i in u["inputs"]])
                 for u in d["units"]]
        return cls(specs, units, InnerGenotype.from_dict(d["learning"]), int(d["budget"]),
                   d.get("learning_nt", LEARNING_NT))

    def dumps(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=1)

    def __eq__(self, other):
        return isinstance(other, Genome) and self.to_dict() == other.to_dict()


def save_genome(genome: Genome, path) -> None:
    Path(path).write_text(genome.dumps() + "\n", encoding="utf-8")


def load_genome(path) -> Genome:
    return Genome.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def window(index: int, levels_back: int) -> list[int]:
    """Admissible input positions for unit ``index`` (-1 is the network input)."""
    return list(range(max(-1, index - levels_back), index))


def _random_inputs(index, spec, rng):
    if not spec.allow_skip:
        return [index - 1]
    cands = window(index, spec.levels_back)
    k = int(rng.integers(1, len(cands) + 1))
    picked = rng.choice(len(cands), size=k, replace=False)
    return sorted(cands[i] for i in picked)


def random_genome(specs, grammar: Grammar, rng: np.random.Generator, budget: int = 1,
                  learning_nt: str = LEARNING_NT) -> Genome:
    """Random unit counts, random inner derivations, random (repaired) connectivity."""
    specs = tuple(specs)
    units = []
    for spec in specs:
        n = int(rng.integers(spec.min_units, spec.max_units + 1))
        for _ in range(n):
            units.append(Unit(spec.nonterminal, derive(grammar, spec.nonterminal, rng), []))
    for i, u in enumerate(units):
        u.inputs = _random_inputs(i, next(s for s in specs if s.nonterminal == u.module), rng)
    learning = derive(grammar, learning_nt, rng)
    return repair_dead_ends(Genome(specs, units, learning, budget, learning_nt), rng)


def validate(genome: Genome, budget_bounds: tuple | None = None) -> list[str]:
    """All invariant violations, as ``"unit i (module): rule: detail"`` strings."""
    out = []
    order = [s.nonterminal for s in genome.specs]
    units = genome.layer_units
    last_pos = -1
    for i, u in enumerate(units):
        if u.module not in order:
            out.append(f"unit {i} ({u.module}): module: unknown module")
            continue
        pos = order.index(u.module)
        if pos < last_pos:
            out.append(f"unit {i} ({u.module}): module-order: follows a later module")
        last_pos = max(last_pos, pos)
    counts = genome.counts()
    for s in genome.specs:
        if not s.min_units <= counts[s.nonterminal] <= s.max_units:
            out.append(f"module {s.nonterminal}: count: {counts[s.nonterminal]} units outside "
                       f"[{s.min_units}, {s.max_units}]")
    final = genome.specs[-1].nonterminal
    if counts.get(final, 0) != 1 or not units or units[-1].module != final:
        out.append(f"module {final}: sink: exactly one final unit required, last in order")

    consumed = set()
    for i, u in enumerate(units):
        if u.module not in order:
            continue
        spec = genome.spec(u.module)
        tag = f"unit {i} ({u.module})"
        if not u.inputs:
            out.append(f"{tag}: inputs: no input connection")
            continue
        if len(set(u.inputs)) != len(u.inputs):
            out.append(f"{tag}: inputs: duplicated input")
        for src in u.inputs:
            if not -1 <= src < i:
                out.append(f"{tag}: order: input {src} is not an earlier unit")
            elif i - src > spec.levels_back:
                out.append(f"{tag}: window: input {src} beyond levels-back {spec.levels_back}")
        if not spec.allow_skip and list(u.inputs) != [i - 1]:
            out.append(f"{tag}: chain: non-skip module requires inputs [{i - 1}]")
        consumed.update(u.inputs)
    for i in range(len(units) - 1):
        if i not in consumed:
            out.append(f"unit {i} ({units[i].module}): dead-end: output not consumed")
    if budget_bounds is not None:
        lo, hi = budget_bounds
        if not lo <= genome.budget <= hi:
            out.append(f"genome: budget: {genome.budget} outside [{lo}, {hi}]")
    return out


def successors(genome: Genome, index: int) -> list[int]:
    """Later units that may legally take ``index`` as an extra input."""
    out = []
    for j in range(index + 1, len(genome.layer_units)):
        spec = genome.spec_of(j)
        if spec.allow_skip and j - index <= spec.levels_back:
            out.append(j)
    return out


def repair_dead_ends(genome: Genome, rng: np.random.Generator) -> Genome:
    """Wire every unconsumed non-final unit into a random valid successor."""
    g = genome.copy()
    n = len(g.layer_units)
    consumed = {src for u in g.layer_units for src in u.inputs}
    for i in range(n - 1):
        if i in consumed:
            continue
        cands = successors(g, i)
        if not cands:
            raise RepairError(f"unit {i} has no valid successor within levels-back")
        j = cands[int(rng.integers(len(cands)))]
        g.layer_units[j].inputs = sorted(g.layer_units[j].inputs + [i])
        consumed.add(i)
    return g


def decode_genome(genome: Genome, grammar: Grammar, input_shape=(32, 32, 3)) -> NetworkPlan:
    descriptors = [descriptor_from_attrs(decode(grammar, u.inner), u.inputs) for u in genome.layer_units]
    learning = decode(grammar, genome.learning_unit)
    return NetworkPlan(descriptors, tuple(input_shape), learning)


def seed_genome(variant: str = "neronet", rng: np.random.Generator | None = None,
                budget: int | None = None) -> Genome:
    """Hand-transcribed seed architecture (see ``assets/seed_<variant>.json``).

    With ``rng`` the learning unit is freshly derived; otherwise the stored
    default learning unit is kept.
    """
    text = resources.files("robustevo.assets").joinpath(f"seed_{variant}.json").read_text("utf-8")
    doc = json.loads(text)
    g = Genome.from_dict(doc["genome"])
    if rng is not None:
        g.learning_unit = derive(load_grammar(doc["grammar"]), g.learning_nt, rng)
    if budget is not None:
        g.budget = budget
    return g
