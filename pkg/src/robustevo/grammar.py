"""Context-free grammar parsing and the DSGE inner-level genotype.

Grammar files are line oriented::

    <nt> ::= alt | alt | ...

where an alternative is a sequence of ``<nonterminal>`` references,
``key:value`` terminals and ``[name,kind,count,min,max]`` parameter tuples.
A line without ``::=`` continues the previous production; ``#`` starts a
comment.  Duplicated alternatives are the only weighting mechanism: choices
are always drawn uniformly over the written alternatives.
"""
from __future__ import annotations

import copy
import re
from dataclasses import dataclass, field
from fractions import Fraction
from importlib import resources
from pathlib import Path
from typing import Union

import numpy as np

PARAMETER_KINDS = ("int", "float", "int_power2", "int_power10")
MAX_DEPTH = 50

_TOKEN = re.compile(r"<[^<>\s]+>|\[[^\]]*\]|\||[^\s|]+")
_IDENT = re.compile(r"^[A-Za-z_][A-Za-z0-9_\-]*$")


class GrammarError(ValueError):
    pass


@dataclass(frozen=True)
class ParameterSpec:
    name: str
    kind: str
    count: int
    min: float
    max: float

    def __post_init__(self):
        if self.kind not in PARAMETER_KINDS:
            raise GrammarError(f"unknown parameter kind {self.kind!r}")
        if self.count < 1:
            raise GrammarError(f"parameter {self.name}: count must be >= 1")
        if self.min > self.max:
            raise GrammarError(f"parameter {self.name}: min > max")
        if self.kind != "float" and (self.min != int(self.min) or self.max != int(self.max)):
            raise GrammarError(f"parameter {self.name}: integer bounds required for {self.kind}")

    @property
    def is_float(self) -> bool:
        return self.kind == "float"

    def sample(self, rng: np.random.Generator) -> list:
        if self.is_float:
            return [float(v) for v in rng.uniform(self.min, self.max, size=self.count)]
        return [int(v) for v in rng.integers(int(self.min), int(self.max) + 1, size=self.count)]

    def __str__(self):
        return f"[{self.name},{self.kind},{self.count},{_fmt(self.min)},{_fmt(self.max)}]"


@dataclass(frozen=True)
class Terminal:
    key: str
    value: str

    def __str__(self):
        return f"{self.key}:{self.value}"


@dataclass(frozen=True)
class NonterminalRef:
    name: str

    def __str__(self):
        return f"<{self.name}>"


Symbol = Union[NonterminalRef, Terminal, ParameterSpec]


def _fmt(v):
    return str(int(v)) if float(v) == int(v) else repr(float(v))


class Grammar:
    """Immutable set of productions, keyed by nonterminal name."""

    def __init__(self, productions: dict[str, tuple[tuple[Symbol, ...], ...]]):
        self._productions = {nt: tuple(tuple(a) for a in alts) for nt, alts in productions.items()}
        self._check()

    def _check(self):
        for nt, alts in self._productions.items():
            if not alts:
                raise GrammarError(f"<{nt}> has no alternatives")
            for alt in alts:
                if not alt:
                    raise GrammarError(f"<{nt}> has an empty alternative")
                for sym in alt:
                    if isinstance(sym, NonterminalRef) and sym.name not in self._productions:
                        raise GrammarError(f"undefined nonterminal <{sym.name}> referenced from <{nt}>")
                    if isinstance(sym, Terminal) and not _IDENT.match(sym.key):
                        raise GrammarError(f"bad terminal key {sym.key!r} in <{nt}>")

    @property
    def productions(self):
        return dict(self._productions)

    @property
    def nonterminals(self):
        return list(self._productions)

    def alternatives(self, nt: str):
        try:
            return self._productions[nt]
        except KeyError:
            raise GrammarError(f"undefined nonterminal <{nt}>") from None

    def __contains__(self, nt):
        return nt in self._productions

    def __eq__(self, other):
        return isinstance(other, Grammar) and self._productions == other._productions

    def __hash__(self):
        return hash(self.to_text())

    def to_text(self) -> str:
        lines = []
        for nt, alts in self._productions.items():
            body = " | ".join(" ".join(str(s) for s in alt) for alt in alts)
            lines.append(f"<{nt}> ::= {body}")
        return "\n".join(lines) + "\n"


def _parse_symbol(tok: str, nt: str) -> Symbol:
    if tok.startswith("<"):
        return NonterminalRef(tok[1:-1])
    if tok.startswith("["):
        parts = [p.strip() for p in tok[1:-1].split(",")]
        if len(parts) != 5:
            raise GrammarError(f"malformed parameter tuple {tok} in <{nt}>: expected 5 fields")
        name, kind, count, lo, hi = parts
        try:
            count = int(count)
            if kind == "float":
                lo, hi = float(lo), float(hi)
            else:
                lo, hi = int(lo), int(hi)
        except ValueError:
            raise GrammarError(f"malformed parameter tuple {tok} in <{nt}>") from None
        return ParameterSpec(name, kind, count, lo, hi)
    key, sep, value = tok.partition(":")
    if not sep or not key:
        raise GrammarError(f"bad terminal {tok!r} in <{nt}>: expected key:value")
    return Terminal(key, value)


def parse_grammar(text: str) -> Grammar:
    """Parse grammar source text into a :class:`Grammar`."""
    bodies: dict[str, list[str]] = {}
    current = None
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = re.sub(r"(^|\s)#.*$", "", raw).strip()
        if not line:
            continue
        if "::=" in line:
            head, _, body = line.partition("::=")
            head = head.strip()
            if not (head.startswith("<") and head.endswith(">")):
                raise GrammarError(f"line {lineno}: left-hand side must be <nonterminal>")
            current = head[1:-1]
            if current in bodies:
                raise GrammarError(f"line {lineno}: <{current}> defined twice")
            bodies[current] = [body]
        elif current is None:
            raise GrammarError(f"line {lineno}: continuation before any production")
        else:
            bodies[current].append(line)

    productions = {}
    for nt, chunks in bodies.items():
        alts, alt = [], []
        for tok in _TOKEN.findall(" ".join(chunks)):
            if tok == "|":
                if not alt:
                    raise GrammarError(f"<{nt}> has an empty alternative")
                alts.append(tuple(alt))
                alt = []
            else:
                alt.append(_parse_symbol(tok, nt))
        if not alt:
            raise GrammarError(f"<{nt}> has an empty alternative")
        alts.append(tuple(alt))
        productions[nt] = tuple(alts)
    return Grammar(productions)


def load_grammar(name_or_path: str | Path) -> Grammar:
    """Load a bundled grammar (``"neronet"``, ``"desk"``) or a grammar file."""
    path = Path(name_or_path)
    if path.suffix != ".grammar" and not path.exists():
        text = resources.files("robustevo.assets").joinpath(f"{name_or_path}.grammar").read_text("utf-8")
    else:
        text = path.read_text("utf-8")
    return parse_grammar(text)


def realize_parameter(spec: ParameterSpec, raw) -> list:
    """Map raw genotype values to phenotype values (powers for the power kinds)."""
    raw = list(raw)
    if len(raw) != spec.count:
        raise GrammarError(f"{spec.name}: expected {spec.count} values, got {len(raw)}")
    for v in raw:
        if not spec.min <= v <= spec.max:
            raise GrammarError(f"{spec.name}: value {v} outside [{spec.min}, {spec.max}]")
    if spec.kind == "float":
        return [float(v) for v in raw]
    if spec.kind == "int":
        return [int(v) for v in raw]
    base = 2 if spec.kind == "int_power2" else 10
    out = []
    for e in raw:
        e = int(e)
        out.append(base**e if e >= 0 else float(Fraction(1, base ** (-e))))
    return out


ParamKey = tuple  # (nonterminal, spec name, occurrence index)


@dataclass
class InnerGenotype:
    start: str
    choices: dict[str, list[int]] = field(default_factory=dict)
    params: dict[ParamKey, list] = field(default_factory=dict)

    def copy(self) -> "InnerGenotype":
        return copy.deepcopy(self)

    def to_dict(self) -> dict:
        return {
            "start": self.start,
            "choices": {k: list(v) for k, v in sorted(self.choices.items())},
            "params": [[nt, name, occ, list(vals)] for (nt, name, occ), vals in sorted(self.params.items())],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "InnerGenotype":
        return cls(
            start=d["start"],
            choices={k: [int(i) for i in v] for k, v in d["choices"].items()},
            params={(nt, name, int(occ)): list(vals) for nt, name, occ, vals in d["params"]},
        )


# Derivation trees: the per-nonterminal choice lists of DSGE are a
# linearization of this tree, so mutations operate on the tree and re-flatten.

@dataclass
class _Node:
    nt: str
    choice: int
    children: list  # _Node | Terminal | _Param


@dataclass
class _Param:
    spec: ParameterSpec
    raw: list


def _grow(grammar: Grammar, nt: str, rng: np.random.Generator, depth: int = 0) -> _Node:
    if depth >= MAX_DEPTH:
        raise GrammarError(f"derivation deeper than {MAX_DEPTH} (non-terminating grammar?)")
    alts = grammar.alternatives(nt)
    idx = int(rng.integers(len(alts))) if len(alts) > 1 else 0
    return _Node(nt, idx, _grow_children(grammar, alts[idx], rng, depth))


def _grow_children(grammar, alt, rng, depth):
    children = []
    for sym in alt:
        if isinstance(sym, NonterminalRef):
            children.append(_grow(grammar, sym.name, rng, depth + 1))
        elif isinstance(sym, ParameterSpec):
            children.append(_Param(sym, sym.sample(rng)))
        else:
            children.append(sym)
    return children


def _flatten(root: _Node) -> InnerGenotype:
    g = InnerGenotype(root.nt)
    occurrences: dict[tuple, int] = {}

    def walk(node):
        g.choices.setdefault(node.nt, []).append(node.choice)
        for child in node.children:
            if isinstance(child, _Node):
                walk(child)
            elif isinstance(child, _Param):
                key = (node.nt, child.spec.name)
                occ = occurrences.get(key, 0)
                occurrences[key] = occ + 1
                g.params[(node.nt, child.spec.name, occ)] = list(child.raw)

    walk(root)
    return g


def _replay(grammar: Grammar, genotype: InnerGenotype) -> _Node:
    """Rebuild the derivation tree encoded by ``genotype``; strict on surplus/deficit."""
    positions: dict[str, int] = {}
    occurrences: dict[tuple, int] = {}
    used_params = set()

    def build(nt, depth):
        if depth >= MAX_DEPTH:
            raise GrammarError(f"derivation deeper than {MAX_DEPTH}")
        alts = grammar.alternatives(nt)
        pos = positions.get(nt, 0)
        seq = genotype.choices.get(nt, [])
        if pos >= len(seq):
            raise GrammarError(f"genotype lacks choice #{pos} for <{nt}>")
        idx = seq[pos]
        positions[nt] = pos + 1
        if not 0 <= idx < len(alts):
            raise GrammarError(f"choice {idx} out of bounds for <{nt}> ({len(alts)} alternatives)")
        children = []
        for sym in alts[idx]:
            if isinstance(sym, NonterminalRef):
                children.append(build(sym.name, depth + 1))
            elif isinstance(sym, ParameterSpec):
                occ = occurrences.get((nt, sym.name), 0)
                occurrences[(nt, sym.name)] = occ + 1
                key = (nt, sym.name, occ)
                if key not in genotype.params:
                    raise GrammarError(f"missing parameter entry {key}")
                used_params.add(key)
                children.append(_Param(sym, list(genotype.params[key])))
            else:
                children.append(sym)
        return _Node(nt, idx, children)

    root = build(genotype.start, 0)
    for nt, seq in genotype.choices.items():
        if positions.get(nt, 0) != len(seq):
            raise GrammarError(f"surplus choices stored for <{nt}>")
    extra = set(genotype.params) - used_params
    if extra:
        raise GrammarError(f"surplus parameter entries {sorted(extra)}")
    return root


def derive(grammar: Grammar, start: str, rng: np.random.Generator) -> InnerGenotype:
    """Random complete derivation from ``start``."""
    grammar.alternatives(start)
    return _flatten(_grow(grammar, start, rng))


def decode(grammar: Grammar, genotype: InnerGenotype, start: str | None = None) -> list[tuple]:
    """Genotype to ordered (key, value) attribute list.

    Terminals yield string values; parameters yield their realized values
    (a scalar when the tuple count is 1, otherwise a list).
    """
    if start is not None and start != genotype.start:
        genotype = InnerGenotype(start, genotype.choices, genotype.params)
    root = _replay(grammar, genotype)
    attrs = []

    def walk(node):
        for child in node.children:
            if isinstance(child, _Node):
                walk(child)
            elif isinstance(child, _Param):
                vals = realize_parameter(child.spec, child.raw)
                attrs.append((child.spec.name, vals[0] if child.spec.count == 1 else vals))
            else:
                attrs.append((child.key, child.value))

    walk(root)
    return attrs


def _nodes(root: _Node):
    stack = [root]
    while stack:
        node = stack.pop()
        yield node
        stack.extend(c for c in reversed(node.children) if isinstance(c, _Node))


def mutate_choice(grammar: Grammar, genotype: InnerGenotype, rng: np.random.Generator) -> InnerGenotype:
    """Re-draw one derivation choice (to a different alternative) and regrow below it."""
    root = _replay(grammar, genotype)
    mutable = [n for n in _nodes(root) if len(grammar.alternatives(n.nt)) > 1]
    if not mutable:
        return genotype.copy()
    node = mutable[int(rng.integers(len(mutable)))]
    n_alts = len(grammar.alternatives(node.nt))
    new = int(rng.integers(n_alts - 1))
    if new >= node.choice:
        new += 1
    node.choice = new
    node.children = _grow_children(grammar, grammar.alternatives(node.nt)[new], rng, 0)
    return _flatten(root)


def perturb_float(grammar: Grammar, genotype: InnerGenotype, rng: np.random.Generator,
                  mu: float = 0.0, sigma: float = 0.15) -> InnerGenotype:
    """Mutate one parameter value.

    Float values get additive Gaussian noise clamped to the tuple bounds;
    integer and power-exponent values are re-drawn uniformly.
    """
    root = _replay(grammar, genotype)
    slots = []
    for node in _nodes(root):
        for child in node.children:
            if isinstance(child, _Param):
                slots.extend((child, i) for i in range(len(child.raw)))
    if not slots:
        return genotype.copy()
    param, i = slots[int(rng.integers(len(slots)))]
    spec = param.spec
    if spec.is_float:
        value = param.raw[i] + float(rng.normal(mu, sigma))
        param.raw[i] = float(min(max(value, spec.min), spec.max))
    else:
        param.raw[i] = int(rng.integers(int(spec.min), int(spec.max) + 1))
    return _flatten(root)


def parameter_slots(grammar: Grammar, genotype: InnerGenotype):
    """(key, spec) pairs for every parameter entry of a genotype, in derivation order."""
    root = _replay(grammar, genotype)
    out = []
    occurrences: dict[tuple, int] = {}

    def walk(node):
        for child in node.children:
            if isinstance(child, _Node):
                walk(child)
            elif isinstance(child, _Param):
                occ = occurrences.get((node.nt, child.spec.name), 0)
                occurrences[(node.nt, child.spec.name)] = occ + 1
                out.append(((node.nt, child.spec.name, occ), child.spec))

    walk(root)
    return out


def construct(grammar: Grammar, start: str, picks: dict | None = None, values: dict | None = None) -> InnerGenotype:
    """Build a genotype from explicit choices.

    ``picks`` maps a nonterminal to the alternative indices of its successive
    expansions (single-alternative nonterminals need no entry); ``values``
    maps a parameter name to the raw values of its successive occurrences.
    """
    picks = {k: list(v) for k, v in (picks or {}).items()}
    values = {k: list(v) for k, v in (values or {}).items()}

    def build(nt, depth):
        if depth >= MAX_DEPTH:
            raise GrammarError(f"derivation deeper than {MAX_DEPTH}")
        alts = grammar.alternatives(nt)
        if len(alts) > 1:
            if not picks.get(nt):
                raise GrammarError(f"no choice supplied for <{nt}>")
            idx = picks[nt].pop(0)
        else:
            idx = 0
        if not 0 <= idx < len(alts):
            raise GrammarError(f"choice {idx} out of bounds for <{nt}>")
        children = []
        for sym in alts[idx]:
            if isinstance(sym, NonterminalRef):
                children.append(build(sym.name, depth + 1))
            elif isinstance(sym, ParameterSpec):
                if not values.get(sym.name):
                    raise GrammarError(f"no value supplied for parameter {sym.name}")
                raw = values[sym.name].pop(0)
                raw = list(raw) if isinstance(raw, (list, tuple)) else [raw]
                realize_parameter(sym, raw)
                children.append(_Param(sym, raw))
            else:
                children.append(sym)
        return _Node(nt, idx, children)

    return _flatten(build(start, 0))
